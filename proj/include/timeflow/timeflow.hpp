/*
 * TimeFlow longitudinal registration
 *
 * Copyright 2026 The TimeFlow Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Convenience header for the whole library except figure output
// (timeflow/plot.hpp, which additionally needs libpng).

#pragma once

#include "timeflow/aging.hpp"
#include "timeflow/config.hpp"
#include "timeflow/losses.hpp"
#include "timeflow/manifest.hpp"
#include "timeflow/metrics.hpp"
#include "timeflow/nifti.hpp"
#include "timeflow/phantom.hpp"
#include "timeflow/tempnet.hpp"
#include "timeflow/trainer.hpp"
#include "timeflow/warpfield.hpp"
