#pragma once

#include "statfem/linalg.hpp"
#include "statfem/mesh.hpp"
#include "statfem/gp_forcing.hpp"
#include "statfem/models.hpp"
#include "statfem/integrators.hpp"
#include "statfem/diagnostics.hpp"
#include "statfem/filters.hpp"
#include "statfem/hyperestimation.hpp"
#include "statfem/io.hpp"
#include "statfem/experiment.hpp"
