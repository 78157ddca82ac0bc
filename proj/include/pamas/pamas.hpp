#pragma once

// Umbrella header for the engine. The live HTTP client lives in
// pamas/remote.hpp and is included only where needed.

#include "pamas/aggregation.hpp"
#include "pamas/backends.hpp"
#include "pamas/common.hpp"
#include "pamas/core.hpp"
#include "pamas/eval.hpp"
#include "pamas/io.hpp"
#include "pamas/routing.hpp"
#include "pamas/topology.hpp"
#include "pamas/training.hpp"
