// Copyright 2026 The MergeQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// Umbrella header.

#pragma once

#include "mergequant/bench.hpp"
#include "mergequant/clip.hpp"
#include "mergequant/compensate.hpp"
#include "mergequant/dimrec.hpp"
#include "mergequant/error.hpp"
#include "mergequant/hadamard.hpp"
#include "mergequant/mqt.hpp"
#include "mergequant/pipeline.hpp"
#include "mergequant/qsm.hpp"
#include "mergequant/quantized_block.hpp"
#include "mergequant/quantizer.hpp"
#include "mergequant/tensor.hpp"
#include "mergequant/toymodel.hpp"
