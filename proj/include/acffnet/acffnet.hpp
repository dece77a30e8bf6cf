#pragma once

#include "acffnet/acff.hpp"
#include "acffnet/augment.hpp"
#include "acffnet/complexity.hpp"
#include "acffnet/conv_unit.hpp"
#include "acffnet/dataset.hpp"
#include "acffnet/error.hpp"
#include "acffnet/explain.hpp"
#include "acffnet/graph.hpp"
#include "acffnet/image.hpp"
#include "acffnet/inference.hpp"
#include "acffnet/layers.hpp"
#include "acffnet/metrics.hpp"
#include "acffnet/model_zoo.hpp"
#include "acffnet/parallel.hpp"
#include "acffnet/serialization.hpp"
#include "acffnet/synthetic.hpp"
#include "acffnet/tensor.hpp"
#include "acffnet/training.hpp"
