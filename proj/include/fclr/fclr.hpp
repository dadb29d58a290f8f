#pragma once

// Umbrella header.

#include "fclr/basis.hpp"
#include "fclr/design.hpp"
#include "fclr/error.hpp"
#include "fclr/parallel.hpp"
#include "fclr/quadrature.hpp"
#include "fclr/selection.hpp"
#include "fclr/simulation.hpp"
#include "fclr/solver.hpp"
