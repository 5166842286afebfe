// Umbrella header.
#pragma once

#include "w2w/backbone.hpp"
#include "w2w/bev_encoder.hpp"
#include "w2w/bev_init.hpp"
#include "w2w/checkpoint.hpp"
#include "w2w/config.hpp"
#include "w2w/grad_check.hpp"
#include "w2w/grad_suite.hpp"
#include "w2w/image.hpp"
#include "w2w/metric.hpp"
#include "w2w/model.hpp"
#include "w2w/ops.hpp"
#include "w2w/optim.hpp"
#include "w2w/params.hpp"
#include "w2w/rng.hpp"
#include "w2w/synthetic.hpp"
#include "w2w/tensor.hpp"
#include "w2w/window_matching.hpp"
#include "w2w/commands.hpp"
