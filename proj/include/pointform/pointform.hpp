#pragma once

#include "pointform/checkpoint.hpp"
#include "pointform/csv.hpp"
#include "pointform/data.hpp"
#include "pointform/error.hpp"
#include "pointform/explain.hpp"
#include "pointform/finetune.hpp"
#include "pointform/geometry.hpp"
#include "pointform/mae.hpp"
#include "pointform/model.hpp"
#include "pointform/moco.hpp"
#include "pointform/ops.hpp"
#include "pointform/optim.hpp"
#include "pointform/parallel.hpp"
#include "pointform/pointio.hpp"
#include "pointform/random.hpp"
#include "pointform/tensor.hpp"
