#pragma once

#include "voxdiff/codec.hpp"
#include "voxdiff/common.hpp"
#include "voxdiff/denoiser.hpp"
#include "voxdiff/diffusion.hpp"
#include "voxdiff/gradcheck.hpp"
#include "voxdiff/io.hpp"
#include "voxdiff/metrics.hpp"
#include "voxdiff/optim.hpp"
#include "voxdiff/patch.hpp"
#include "voxdiff/pipeline.hpp"
#include "voxdiff/rng.hpp"
#include "voxdiff/schedule.hpp"
#include "voxdiff/sdf.hpp"
#include "voxdiff/tensor.hpp"
