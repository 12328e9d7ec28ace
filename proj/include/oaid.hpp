#pragma once

#include "oaid/augment.hpp"
#include "oaid/corpus.hpp"
#include "oaid/detector.hpp"
#include "oaid/error.hpp"
#include "oaid/imaging.hpp"
#include "oaid/inpaint.hpp"
#include "oaid/layers.hpp"
#include "oaid/log.hpp"
#include "oaid/matrix.hpp"
#include "oaid/metrics.hpp"
#include "oaid/online_train.hpp"
#include "oaid/optimizer.hpp"
#include "oaid/png_io.hpp"
#include "oaid/rng.hpp"
#include "oaid/tensor.hpp"
