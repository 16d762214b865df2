// Copyright (c) 2026 the oppu authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "oppu/adapters.hpp"
#include "oppu/autodiff.hpp"
#include "oppu/checkpoint.hpp"
#include "oppu/corpus.hpp"
#include "oppu/errors.hpp"
#include "oppu/evaluation.hpp"
#include "oppu/lm_config.hpp"
#include "oppu/model.hpp"
#include "oppu/optim.hpp"
#include "oppu/personal.hpp"
#include "oppu/pipeline.hpp"
#include "oppu/prompting.hpp"
#include "oppu/registry.hpp"
#include "oppu/retrieval.hpp"
#include "oppu/synthetic.hpp"
#include "oppu/tensor.hpp"
#include "oppu/tokenizer.hpp"
#include "oppu/training.hpp"
#include "oppu/util.hpp"
