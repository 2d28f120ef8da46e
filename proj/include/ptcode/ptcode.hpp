#pragma once

#include "ptcode/autodiff.hpp"
#include "ptcode/certify.hpp"
#include "ptcode/checkpoint.hpp"
#include "ptcode/coco.hpp"
#include "ptcode/corpus.hpp"
#include "ptcode/encoder.hpp"
#include "ptcode/error.hpp"
#include "ptcode/gradcheck.hpp"
#include "ptcode/pretrain.hpp"
#include "ptcode/random.hpp"
#include "ptcode/subtitle.hpp"
#include "ptcode/synthetic.hpp"
#include "ptcode/tensor.hpp"
#include "ptcode/uler.hpp"
