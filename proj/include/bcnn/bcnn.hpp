#pragma once

#include "bcnn/binarize.hpp"
#include "bcnn/dataset.hpp"
#include "bcnn/error.hpp"
#include "bcnn/layers.hpp"
#include "bcnn/metrics.hpp"
#include "bcnn/model_store.hpp"
#include "bcnn/network.hpp"
#include "bcnn/packed.hpp"
#include "bcnn/rng.hpp"
#include "bcnn/tensor.hpp"
#include "bcnn/train.hpp"
