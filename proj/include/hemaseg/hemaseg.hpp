#pragma once

#include "hemaseg/autodiff/gradcheck.hpp"
#include "hemaseg/autodiff/ops.hpp"
#include "hemaseg/autodiff/tape.hpp"
#include "hemaseg/checkpoint.hpp"
#include "hemaseg/commands.hpp"
#include "hemaseg/config.hpp"
#include "hemaseg/data.hpp"
#include "hemaseg/dataset.hpp"
#include "hemaseg/export.hpp"
#include "hemaseg/image.hpp"
#include "hemaseg/io.hpp"
#include "hemaseg/mae.hpp"
#include "hemaseg/metrics.hpp"
#include "hemaseg/nn/layers.hpp"
#include "hemaseg/nn/module.hpp"
#include "hemaseg/optim.hpp"
#include "hemaseg/rng.hpp"
#include "hemaseg/sweep.hpp"
#include "hemaseg/tensor.hpp"
#include "hemaseg/train.hpp"
#include "hemaseg/unetr.hpp"
#include "hemaseg/vit.hpp"
