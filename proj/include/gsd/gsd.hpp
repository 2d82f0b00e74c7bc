// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "gsd/common.hpp"
#include "gsd/config.hpp"
#include "gsd/diffusion.hpp"
#include "gsd/distillation.hpp"
#include "gsd/experiment.hpp"
#include "gsd/external.hpp"
#include "gsd/guidance.hpp"
#include "gsd/io.hpp"
#include "gsd/metrics.hpp"
#include "gsd/optimizer.hpp"
#include "gsd/rasterizer.hpp"
#include "gsd/scene.hpp"
#include "gsd/synthetic.hpp"
#include "gsd/train.hpp"
