#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "graphite/tensor.hpp"

namespace graphite {

struct GradCheckEntry {
  std::string parameter;
  Index row = 0;
  Index col = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_error = 0;
};

struct GradCheckReport {
  double max_rel_error = 0;
  GradCheckEntry worst;
  std::size_t checked = 0;
  /// Entries whose perturbation crossed a relu/clamp kink; not compared.
  std::vector<GradCheckEntry> skipped;
};

/// Compares reverse-mode gradients of a scalar tape program against central
/// differences. `program` must build a fresh forward pass on the given tape
/// from the current parameter values and return the 1x1 loss.
inline GradCheckReport grad_check(const std::function<Tensor(Tape&)>& program,
                                  std::span<Parameter* const> params, double epsilon = 1e-5) {
  for (Parameter* p : params) p->zero_grad();
  std::uint64_t base_signature = 0;
  std::size_t base_kinks = 0;
  {
    Tape tape;
    Tensor loss = program(tape);
    tape.backward(loss);
    base_signature = tape.branch_signature();
    base_kinks = tape.kink_count();
  }
  auto evaluate = [&](std::uint64_t& signature, std::size_t& kinks) {
    Tape tape;
    const double v = program(tape).item();
    signature = tape.branch_signature();
    kinks = tape.kink_count();
    return v;
  };

  GradCheckReport report;
  for (Parameter* p : params) {
    for (Index c = 0; c < p->value.cols(); ++c) {
      for (Index r = 0; r < p->value.rows(); ++r) {
        const double saved = p->value(r, c);
        std::uint64_t sig_plus = 0, sig_minus = 0;
        std::size_t kinks_plus = 0, kinks_minus = 0;
        p->value(r, c) = saved + epsilon;
        const double f_plus = evaluate(sig_plus, kinks_plus);
        p->value(r, c) = saved - epsilon;
        const double f_minus = evaluate(sig_minus, kinks_minus);
        p->value(r, c) = saved;

        GradCheckEntry entry;
        entry.parameter = p->name;
        entry.row = r;
        entry.col = c;
        entry.analytic = p->grad(r, c);
        entry.numeric = (f_plus - f_minus) / (2.0 * epsilon);
        const double denom =
            std::max({std::abs(entry.analytic), std::abs(entry.numeric), 1e-8});
        entry.rel_error = std::abs(entry.analytic - entry.numeric) / denom;
        if (sig_plus != base_signature || sig_minus != base_signature || kinks_plus != base_kinks ||
            kinks_minus != base_kinks) {
          report.skipped.push_back(entry);
          continue;
        }
        ++report.checked;
        if (report.checked == 1 || entry.rel_error > report.max_rel_error) {
          report.max_rel_error = entry.rel_error;
          report.worst = entry;
        }
      }
    }
  }
  return report;
}

}  // namespace graphite
