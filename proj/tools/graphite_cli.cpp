#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "graphite/checkpoint.hpp"
#include "graphite/config.hpp"
#include "graphite/grad_check.hpp"
#include "graphite/io.hpp"
#include "graphite/meanfield.hpp"
#include "graphite/tasks.hpp"

using namespace graphite;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumeric = 4 };

fs::path output_root(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("GRAPHITE_OUTPUT_ROOT"); env != nullptr && *env) return env;
  return "runs";
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing", path.string());
  os << text;
}

struct RunOptions {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
  int jobs = 1;
  bool with_gcn = false;
};

RunConfig resolve_config(const RunOptions& o, std::optional<TaskKind> forced) {
  std::string text;
  if (!o.config.empty()) {
    std::ifstream is(o.config);
    if (!is) throw ConfigError("cannot open config " + o.config);
    std::stringstream ss;
    ss << is.rdbuf();
    text = ss.str();
  }
  if (forced) text = "task = " + std::string(to_string(*forced)) + "\n" + text;
  for (const auto& kv : o.overrides) {
    if (kv.find('=') == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    text += kv + "\n";
  }
  return parse_run_config(text, o.config.empty() ? "config" : o.config);
}

std::optional<Matrix> prepared_features(const Graph& g, const RunConfig& rc) {
  if (!rc.use_features || !g.features) return std::nullopt;
  return rc.normalize_features ? detail::row_normalize_features(*g.features) : *g.features;
}

Graph load_task_graph(const RunConfig& rc) {
  if (!rc.dataset.empty()) return ingest_citation_dataset(rc.dataset).graph;
  return generate(*rc.family, rc.nodes, detail::mix_seed(rc.base_seed, 99));
}

int run_task(const RunOptions& o, std::optional<TaskKind> forced) {
  const RunConfig rc = resolve_config(o, forced);
  const std::string hash = config_hash(rc);
  const auto start = std::chrono::steady_clock::now();
  std::optional<GraphiteModel> model;
  TaskReport report;
  switch (rc.task) {
    case TaskKind::link:
      report = link_prediction_run(load_task_graph(rc), rc, o.jobs, &model);
      break;
    case TaskKind::density:
      report = density_estimation_run(rc, o.jobs, &model);
      break;
    case TaskKind::classify:
      report = node_classification_run(load_task_graph(rc), rc, o.jobs, o.with_gcn, &model);
      break;
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  const fs::path dir = output_root(o.out) / (std::string(to_string(rc.task)) + "-" +
                                             std::string(to_string(rc.model)) + "-" + hash);
  fs::create_directories(dir);
  write_text(dir / "resolved.cfg", resolved_config_text(rc));
  json j = to_json(report, hash);
  j["wall_seconds"] = seconds;
  write_text(dir / "metrics.json", j.dump(2) + "\n");
  write_text(dir / "metrics.csv", to_csv(report, hash));
  if (model) {
    save_checkpoint((dir / "model.ckpt").string(), *model,
                    {{"config_hash", hash},
                     {"seed", rc.base_seed},
                     {"self_loops", rc.self_loops},
                     {"normalize_features", rc.normalize_features},
                     {"use_features", rc.use_features}});
  }
  std::cout << dir.string() << "\n";
  for (const auto& [name, s] : j["summary"].items()) {
    std::cout << "  " << name << " = " << s["mean"].get<double>() << " +/- " << s["se"].get<double>() << "\n";
  }
  return kOk;
}

int generate_cmd(const std::string& family, Index nodes, std::uint64_t seed, const std::string& out, bool labeled,
                 int classes, Index features) {
  if (labeled) {
    Graph g = planted_partition(nodes, classes, 0.3, 0.02, features, 0.6, seed);
    write_dataset(out, bundle_from_graph(std::move(g)));
  } else {
    write_edge_list(out, generate(parse_family(family), nodes, seed));
  }
  std::cout << out << "\n";
  return kOk;
}

int check_theorem_cmd(int graphs, Index nodes, std::uint64_t seed, const std::string& out) {
  Rng rng(seed);
  std::normal_distribution<double> nd(0.0, 0.5);
  double worst = 0;
  json reports = json::array();
  for (int k = 0; k < graphs; ++k) {
    const Graph g = generate(GraphFamily::erdos_renyi, nodes, rng);
    Matrix mu(nodes, 1);
    for (Index i = 0; i < nodes; ++i) mu(i, 0) = nd(rng);
    const UpdateOperator op = random_scalar_operator(nodes, rng);
    const TheoremReport r = check_theorem(op, g.dense_adjacency(), mu);
    worst = std::max(worst, r.max_abs_diff_vs_taylor);
    reports.push_back(to_json(r));
  }
  const Graph g = generate(GraphFamily::erdos_renyi, nodes, rng, GeneratorParams{.edge_probability = 0.7});
  Matrix mu(nodes, 1);
  for (Index i = 0; i < nodes; ++i) mu(i, 0) = nd(rng);
  const TheoremReport quad = check_theorem(quadratic_operator(), g.dense_adjacency(), mu);
  json j{{"graphs", graphs},
         {"max_abs_diff", worst},
         {"tolerance", 1e-12},
         {"quadratic", to_json(quad)},
         {"reports", reports}};
  const std::string text = j.dump(2) + "\n";
  if (out.empty()) std::cout << text;
  else write_text(out, text);
  return worst <= 1e-12 ? kOk : kNumeric;
}

int grad_check_cmd(const std::string& kind, Index nodes, Index features, std::uint64_t seed) {
  ModelConfig c;
  c.kind = parse_model_kind(kind);
  c.node_count = nodes;
  c.feature_dim = features;
  c.encoder_hidden = {5};
  c.latent_dim = 3;
  c.decoder_dims = {4, 3};
  c.seed = seed;
  GraphiteModel model(c);
  Rng rng(seed + 1);
  std::normal_distribution<double> nd(0.0, 0.5);
  for (Parameter* p : model.parameters())
    for (Index k = 0; k < p->value.size(); ++k) p->value.data()[k] = nd(rng);
  const Graph g = generate(GraphFamily::erdos_renyi, nodes, rng);
  std::optional<Matrix> x;
  if (features > 0) x = detail::gaussian_noise(nodes, features, rng);
  const Matrix noise = detail::gaussian_noise(nodes, c.latent_dim, rng);
  auto op = GraphOperator::sparse(normalize_sym(g));
  auto target = std::make_shared<const Matrix>(reconstruction_target(g));
  auto params = model.parameters();
  const auto r = grad_check([&](Tape& tape) { return objective(tape, model, op, x, target, &noise).loss; }, params);
  json j{{"model", kind},
         {"nodes", nodes},
         {"checked", r.checked},
         {"skipped", r.skipped.size()},
         {"max_rel_error", r.max_rel_error},
         {"worst", {{"parameter", r.worst.parameter}, {"row", r.worst.row}, {"col", r.worst.col}}},
         {"tolerance", 1e-4}};
  std::cout << j.dump(2) << "\n";
  return r.max_rel_error <= 1e-4 ? kOk : kNumeric;
}

int export_cmd(const std::string& checkpoint, const std::string& dataset, const std::string& edges,
               const std::string& out) {
  LoadedCheckpoint ck = load_checkpoint(checkpoint);
  DatasetBundle b = !dataset.empty() ? ingest_citation_dataset(dataset) : bundle_from_graph(read_edge_list(edges));
  const ModelConfig& c = ck.model->config();
  const Index n = b.graph.node_count();
  const bool use_features = ck.meta.value("use_features", true) && c.feature_dim > 0;
  if (c.feature_dim > 0 && (!b.graph.features || b.feature_dim != c.feature_dim)) {
    throw DataError("checkpoint expects " + std::to_string(c.feature_dim) + " features, dataset has " +
                    std::to_string(b.feature_dim));
  }
  if (c.feature_dim == 0 && c.node_count != n) {
    throw DataError("featureless checkpoint was trained on " + std::to_string(c.node_count) + " nodes, dataset has " +
                    std::to_string(n));
  }
  RunConfig rc;
  rc.use_features = use_features;
  rc.normalize_features = ck.meta.value("normalize_features", false);
  const auto x = prepared_features(b.graph, rc);
  const Matrix z = mean_embedding(
      *ck.model, GraphOperator::sparse(normalize_sym(b.graph, ck.meta.value("self_loops", true))), x);
  write_embeddings(out, b.ids, z);
  std::cout << out << " (" << z.rows() << " x " << z.cols() << ")\n";
  return kOk;
}

void add_run_options(CLI::App* cmd, RunOptions& o, bool config_required) {
  auto* opt = cmd->add_option("-c,--config", o.config, "key = value run configuration");
  if (config_required) opt->required();
  cmd->add_option("-s,--set", o.overrides, "extra key=value settings, applied after the file");
  cmd->add_option("-o,--out", o.out, "output root (default $GRAPHITE_OUTPUT_ROOT or ./runs)");
  cmd->add_option("-j,--jobs", o.jobs, "seeds trained in parallel")->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"graphite: graph autoencoders with iterative decoding"};
  app.require_subcommand(1);
  std::string log_level = "warn";
  app.add_option("--log-level", log_level, "debug, info, warn, error")
      ->check(CLI::IsMember({"debug", "info", "warn", "error"}));

  std::string family = "erdos_renyi", out_path, dataset, edges, checkpoint, kind = "graphite_vae";
  Index nodes = 20, features = 0;
  std::uint64_t seed = 0;
  bool labeled = false;
  int classes = 3, graphs = 100;

  auto* gen = app.add_subcommand("generate", "write a synthetic graph (edge list) or labeled dataset");
  gen->add_option("--family", family, "graph family");
  gen->add_option("-n,--nodes", nodes)->check(CLI::PositiveNumber);
  gen->add_option("--seed", seed);
  gen->add_option("-o,--out", out_path)->required();
  gen->add_flag("--labeled", labeled, "planted-partition dataset directory with features and labels");
  gen->add_option("--classes", classes)->check(CLI::PositiveNumber);
  gen->add_option("--features", features);

  RunOptions run_opts;
  auto* run = app.add_subcommand("run", "run the task named in a config file");
  add_run_options(run, run_opts, true);
  auto* train = app.add_subcommand("train", "same as run");
  add_run_options(train, run_opts, true);
  auto* eval_link = app.add_subcommand("eval-link", "link prediction");
  add_run_options(eval_link, run_opts, false);
  auto* eval_density = app.add_subcommand("eval-density", "density estimation on a graph family");
  add_run_options(eval_density, run_opts, false);
  auto* eval_classify = app.add_subcommand("eval-classify", "semi-supervised node classification");
  add_run_options(eval_classify, run_opts, false);
  eval_classify->add_flag("--with-gcn", run_opts.with_gcn, "also train the standalone GCN classifier");

  auto* theorem = app.add_subcommand("check-theorem", "mean-field / GNN first-order equivalence report (JSON)");
  theorem->add_option("--graphs", graphs)->check(CLI::PositiveNumber);
  theorem->add_option("-n,--nodes", nodes)->check(CLI::PositiveNumber);
  theorem->add_option("--seed", seed);
  theorem->add_option("-o,--out", out_path);

  auto* grad = app.add_subcommand("grad-check", "finite-difference check of the training objective");
  grad->add_option("--model", kind);
  grad->add_option("-n,--nodes", nodes)->check(CLI::PositiveNumber);
  grad->add_option("--features", features);
  grad->add_option("--seed", seed);

  auto* exp = app.add_subcommand("export-embeddings", "write Z_final of a checkpoint as TSV");
  exp->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  auto* ds = exp->add_option("--dataset", dataset, "dataset directory");
  auto* el = exp->add_option("--edges", edges, "edge list file");
  ds->excludes(el);
  exp->add_option("-o,--out", out_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }
  logging::set_level(log_level == "debug"  ? logging::Level::debug
                     : log_level == "info" ? logging::Level::info
                     : log_level == "warn" ? logging::Level::warn
                                           : logging::Level::error);
  try {
    if (gen->parsed()) return generate_cmd(family, nodes, seed, out_path, labeled, classes, features);
    if (run->parsed() || train->parsed()) return run_task(run_opts, std::nullopt);
    if (eval_link->parsed()) return run_task(run_opts, TaskKind::link);
    if (eval_density->parsed()) return run_task(run_opts, TaskKind::density);
    if (eval_classify->parsed()) return run_task(run_opts, TaskKind::classify);
    if (theorem->parsed()) return check_theorem_cmd(graphs, nodes, seed, out_path);
    if (grad->parsed()) return grad_check_cmd(kind, nodes, features, seed);
    if (exp->parsed()) {
      if (dataset.empty() && edges.empty()) throw ConfigError("export-embeddings needs --dataset or --edges");
      return export_cmd(checkpoint, dataset, edges, out_path);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
