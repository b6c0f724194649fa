#pragma once

#include "alct/errors.hpp"
#include "alct/tensor.hpp"
#include "alct/ops.hpp"
#include "alct/config.hpp"
#include "alct/halting.hpp"
#include "alct/parallel_mask.hpp"
#include "alct/model.hpp"
#include "alct/objective.hpp"
#include "alct/optim.hpp"
#include "alct/corpus.hpp"
#include "alct/tokenizer.hpp"
#include "alct/checkpoint.hpp"
#include "alct/trainer.hpp"
#include "alct/inference.hpp"
#include "alct/analysis.hpp"
