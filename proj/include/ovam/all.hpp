#pragma once

#include "ovam/array.hpp"
#include "ovam/backend.hpp"
#include "ovam/config.hpp"
#include "ovam/crf.hpp"
#include "ovam/dataset.hpp"
#include "ovam/error.hpp"
#include "ovam/evaluation.hpp"
#include "ovam/external_backend.hpp"
#include "ovam/heatmap_io.hpp"
#include "ovam/image.hpp"
#include "ovam/mask.hpp"
#include "ovam/optimizer.hpp"
#include "ovam/ovam.hpp"
#include "ovam/permutohedral.hpp"
#include "ovam/prng.hpp"
#include "ovam/token_io.hpp"
#include "ovam/toy_backend.hpp"
#include "ovam/trace_io.hpp"
