#pragma once

#include "poredit/checkpoint.hpp"
#include "poredit/config.hpp"
#include "poredit/diffusion.hpp"
#include "poredit/errors.hpp"
#include "poredit/lbm.hpp"
#include "poredit/metrics.hpp"
#include "poredit/network.hpp"
#include "poredit/parallel.hpp"
#include "poredit/rng.hpp"
#include "poredit/tensor.hpp"
#include "poredit/tiling.hpp"
#include "poredit/training.hpp"
#include "poredit/volume.hpp"
