#pragma once

#include "detailclip/autograd.hpp"
#include "detailclip/checkpoint.hpp"
#include "detailclip/config.hpp"
#include "detailclip/data.hpp"
#include "detailclip/ema.hpp"
#include "detailclip/errors.hpp"
#include "detailclip/heads.hpp"
#include "detailclip/masking.hpp"
#include "detailclip/nn.hpp"
#include "detailclip/objectives.hpp"
#include "detailclip/optim.hpp"
#include "detailclip/tensor.hpp"
#include "detailclip/text.hpp"
#include "detailclip/trainer.hpp"
#include "detailclip/types.hpp"
#include "detailclip/vit.hpp"
