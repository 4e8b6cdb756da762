#pragma once

#include "deepthink/archive.hpp"
#include "deepthink/deepthink.hpp"
#include "deepthink/error.hpp"
#include "deepthink/golden.hpp"
#include "deepthink/kernels.hpp"
#include "deepthink/kvstore.hpp"
#include "deepthink/model_io.hpp"
#include "deepthink/tasks.hpp"
#include "deepthink/tensor.hpp"
#include "deepthink/tokenizer.hpp"
#include "deepthink/transformer.hpp"
