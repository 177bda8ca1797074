#pragma once

#include "apn/checkpoint.hpp"
#include "apn/config.hpp"
#include "apn/data.hpp"
#include "apn/evaluate.hpp"
#include "apn/mi.hpp"
#include "apn/model.hpp"
#include "apn/optim.hpp"
#include "apn/proposal.hpp"
#include "apn/separation.hpp"
#include "apn/spatial.hpp"
#include "apn/spectral.hpp"
#include "apn/training.hpp"
