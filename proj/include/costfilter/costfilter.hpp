#pragma once
// Convenience umbrella header.

#include "costfilter/autograd.hpp"
#include "costfilter/checkpoint.hpp"
#include "costfilter/config.hpp"
#include "costfilter/costvol.hpp"
#include "costfilter/data.hpp"
#include "costfilter/encoders.hpp"
#include "costfilter/errors.hpp"
#include "costfilter/filternet.hpp"
#include "costfilter/infer.hpp"
#include "costfilter/losses.hpp"
#include "costfilter/metrics.hpp"
#include "costfilter/nn.hpp"
#include "costfilter/optim.hpp"
#include "costfilter/synth.hpp"
#include "costfilter/tensor.hpp"
#include "costfilter/train.hpp"
