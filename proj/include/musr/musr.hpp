#pragma once

#include "musr/common.hpp"
#include "musr/config.hpp"
#include "musr/corpus.hpp"
#include "musr/embeddings.hpp"
#include "musr/io.hpp"
#include "musr/losses.hpp"
#include "musr/manifest.hpp"
#include "musr/mining.hpp"
#include "musr/model.hpp"
#include "musr/optim.hpp"
#include "musr/rng.hpp"
#include "musr/tensor.hpp"
#include "musr/thread_pool.hpp"
#include "musr/tokenizer.hpp"
#include "musr/trainer.hpp"
