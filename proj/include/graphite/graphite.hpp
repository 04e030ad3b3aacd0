#pragma once

// Everything.

#include "graphite/adam.hpp"
#include "graphite/checkpoint.hpp"
#include "graphite/config.hpp"
#include "graphite/errors.hpp"
#include "graphite/generators.hpp"
#include "graphite/gnn.hpp"
#include "graphite/grad_check.hpp"
#include "graphite/graph.hpp"
#include "graphite/io.hpp"
#include "graphite/log.hpp"
#include "graphite/meanfield.hpp"
#include "graphite/metrics.hpp"
#include "graphite/model.hpp"
#include "graphite/quadrature.hpp"
#include "graphite/tasks.hpp"
#include "graphite/tensor.hpp"
#include "graphite/wl.hpp"
