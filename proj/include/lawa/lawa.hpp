#pragma once

#include "lawa/averaging.hpp"
#include "lawa/error.hpp"
#include "lawa/evaluation.hpp"
#include "lawa/lmc.hpp"
#include "lawa/manifest.hpp"
#include "lawa/models.hpp"
#include "lawa/optim.hpp"
#include "lawa/parallel.hpp"
#include "lawa/rng.hpp"
#include "lawa/savings.hpp"
#include "lawa/tensor.hpp"
#include "lawa/tensor_store.hpp"
#include "lawa/trainer.hpp"
