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

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "timeflow/errors.hpp"

namespace timeflow {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Extent of a 3D voxel grid. x is the fastest-varying axis in memory.
struct Dims3 {
  Index x = 0;
  Index y = 0;
  Index z = 0;

  constexpr Index count() const { return x * y * z; }
  constexpr Index operator[](int axis) const { return axis == 0 ? x : (axis == 1 ? y : z); }
  constexpr bool operator==(const Dims3&) const = default;
  constexpr bool positive() const { return x > 0 && y > 0 && z > 0; }
  constexpr Index offset(Index i, Index j, Index k) const { return i + x * (j + y * k); }
};

inline std::string to_string(const Dims3& d) {
  return std::to_string(d.x) + "x" + std::to_string(d.y) + "x" + std::to_string(d.z);
}

/// Dense row-major array. Spatial tensors use the layout [N, C, Z, Y, X].
template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T{0}) : shape(std::move(s)), data(numel(shape), fill) {}
  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    if (static_cast<Index>(data.size()) != numel(shape)) {
      throw DimensionError("tensor data size does not match shape " + to_string(shape));
    }
  }

  Index size() const { return static_cast<Index>(data.size()); }
  bool empty() const { return data.empty(); }
  Index rank() const { return static_cast<Index>(shape.size()); }
  Index dim(Index i) const { return shape[static_cast<std::size_t>(i)]; }
  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }
  T& operator[](Index i) { return data[static_cast<std::size_t>(i)]; }
  const T& operator[](Index i) const { return data[static_cast<std::size_t>(i)]; }

  // 5D accessors, valid only for spatial tensors.
  Index batch() const { return shape[0]; }
  Index channels() const { return shape[1]; }
  Dims3 spatial() const { return {shape[4], shape[3], shape[2]}; }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }
};

inline Shape spatial_shape(Index n, Index c, const Dims3& d) { return {n, c, d.z, d.y, d.x}; }

}  // namespace timeflow
