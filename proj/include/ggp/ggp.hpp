#pragma once

// Umbrella header: pulls in the full grouped Gaussian process toolkit.

#include "ggp/common.hpp"
#include "ggp/kernel.hpp"
#include "ggp/kron_linalg.hpp"
#include "ggp/autodiff.hpp"
#include "ggp/model.hpp"
#include "ggp/vi.hpp"
#include "ggp/optim.hpp"
#include "ggp/predict.hpp"
#include "ggp/data.hpp"
#include "ggp/runner.hpp"
