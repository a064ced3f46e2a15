#pragma once

#include "mnf/activations.hpp"
#include "mnf/blocks.hpp"
#include "mnf/cost.hpp"
#include "mnf/graph.hpp"
#include "mnf/model.hpp"
#include "mnf/search.hpp"
#include "mnf/segmentation.hpp"
#include "mnf/spec.hpp"
#include "mnf/tensor.hpp"
