#pragma once

// Umbrella header for the whole library.

#include "diffnet/autodiff.hpp"
#include "diffnet/data.hpp"
#include "diffnet/deconvolve.hpp"
#include "diffnet/diffusion.hpp"
#include "diffnet/grid.hpp"
#include "diffnet/model.hpp"
#include "diffnet/rng.hpp"
#include "diffnet/train.hpp"
