// branchseg/branchseg.hpp -- umbrella include.
//
// Copyright 2026 The branchseg Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "branchseg/common.hpp"
#include "branchseg/config.hpp"
#include "branchseg/dataio.hpp"
#include "branchseg/evalsuite.hpp"
#include "branchseg/losses.hpp"
#include "branchseg/metrics.hpp"
#include "branchseg/network.hpp"
#include "branchseg/png_io.hpp"
#include "branchseg/synthdata.hpp"
#include "branchseg/tensor.hpp"
#include "branchseg/trainer.hpp"
#include "branchseg/types.hpp"
