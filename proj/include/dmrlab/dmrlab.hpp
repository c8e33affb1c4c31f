#pragma once

#include "core.hpp"
#include "grid_paths.hpp"
#include "skorokhod.hpp"
#include "mean_boundaries.hpp"
#include "condexp.hpp"
#include "bsde.hpp"
#include "dmr_solver.hpp"
#include "penalized_solver.hpp"
#include "diagnostics.hpp"
