#ifndef MATRREC_MATRREC_HPP
#define MATRREC_MATRREC_HPP

#include "matrrec/checkpoint.hpp"
#include "matrrec/data.hpp"
#include "matrrec/eval.hpp"
#include "matrrec/model.hpp"
#include "matrrec/run_config.hpp"
#include "matrrec/synth.hpp"
#include "matrrec/train.hpp"

#endif  // MATRREC_MATRREC_HPP
