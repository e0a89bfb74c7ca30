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

#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "test_support.hpp"
#include "timeflow/nn.hpp"

using namespace timeflow;
using ad::Var;
using timeflow::testing::gradcheck;
using timeflow::testing::random_tensor;

namespace {

std::mt19937_64& rng() {
  static std::mt19937_64 r(42);
  return r;
}

Var<double> weighted_reduce(const Var<double>& y) {
  // Fixed pseudo-random weights keep the checked scalar sensitive to every output.
  Tensor<double> w(y.shape());
  for (Index i = 0; i < w.size(); ++i) w[i] = std::sin(1.37 * static_cast<double>(i) + 0.4);
  return ad::sum(ad::mul(y, ad::constant(w)));
}

}  // namespace

TEST(Autograd, ElementwiseOps) {
  auto a = Var<double>::parameter(random_tensor<double>({2, 3}, rng()));
  auto b = Var<double>::parameter(random_tensor<double>({2, 3}, rng(), 0.5, 1.5));
  const Tensor<double> w = random_tensor<double>({2, 3}, rng());
  auto f = [&] {
    auto y = ad::add(ad::mul(a, b), ad::div(a, b));
    y = ad::sub(y, ad::scale(ad::square(a), 0.3));
    y = ad::add(ad::leaky_relu(y), ad::silu(ad::add_scalar(b, -1.0)));
    return ad::sum(ad::mul(y, ad::constant(w)));
  };
  EXPECT_LT(gradcheck(f, {a, b}).max_rel, 1e-6);
}

TEST(Autograd, MaskedMeanMatchesManualAverage) {
  Tensor<double> x({1, 2, 1, 2, 2});
  for (Index i = 0; i < x.size(); ++i) x[i] = static_cast<double>(i);
  Tensor<double> mask({1, 1, 1, 2, 2});
  mask[0] = 1;
  mask[3] = 1;
  auto v = Var<double>::parameter(x);
  auto m = ad::masked_mean(v, mask);
  EXPECT_DOUBLE_EQ(m.item(), (0.0 + 3.0 + 4.0 + 7.0) / 4.0);
  ad::backward(m);
  EXPECT_DOUBLE_EQ(v.grad()[0], 0.25);
  EXPECT_DOUBLE_EQ(v.grad()[1], 0.0);
  Tensor<double> empty({1, 1, 1, 2, 2});
  EXPECT_THROW(ad::masked_mean(v, empty), DegenerateError);
}

TEST(Autograd, SharedSubexpressionAccumulates) {
  auto a = Var<double>::parameter(Tensor<double>({1}, 3.0));
  auto y = ad::mul(a, a);
  auto z = ad::add(y, y);
  ad::backward(z);
  EXPECT_DOUBLE_EQ(a.grad()[0], 12.0);
}

TEST(Autograd, NoGradGuardSkipsGraph) {
  auto a = Var<double>::parameter(Tensor<double>({1}, 2.0));
  ad::NoGradGuard guard;
  auto y = ad::square(a);
  EXPECT_FALSE(y.requires_grad());
}

TEST(NN, Conv3dStrideOneAndTwo) {
  for (Index stride : {1, 2}) {
    auto x = Var<double>::parameter(random_tensor<double>(spatial_shape(2, 2, Dims3{5, 4, 3}), rng()));
    auto w = Var<double>::parameter(random_tensor<double>({3, 2, 3, 3, 3}, rng()));
    auto b = Var<double>::parameter(random_tensor<double>({3}, rng()));
    auto f = [&] { return weighted_reduce(ad::conv3d(x, w, b, stride)); };
    EXPECT_LT(gradcheck(f, {x, w, b}, 10).max_rel, 1e-6) << "stride " << stride;
  }
}

TEST(NN, Conv3dMatchesDirectSum) {
  const Dims3 d{4, 3, 5};
  auto x = Var<double>(random_tensor<double>(spatial_shape(1, 2, d), rng()));
  auto w = Var<double>(random_tensor<double>({2, 2, 3, 3, 3}, rng()));
  auto b = Var<double>(random_tensor<double>({2}, rng()));
  for (Index stride : {1, 2}) {
    auto y = ad::conv3d(x, w, b, stride);
    const Dims3 od = y.value().spatial();
    for (Index co = 0; co < 2; ++co)
      for (Index k = 0; k < od.z; ++k)
        for (Index j = 0; j < od.y; ++j)
          for (Index i = 0; i < od.x; ++i) {
            double acc = b.value()[co];
            for (Index ci = 0; ci < 2; ++ci)
              for (Index dz = 0; dz < 3; ++dz)
                for (Index dy = 0; dy < 3; ++dy)
                  for (Index dx = 0; dx < 3; ++dx) {
                    const Index zi = k * stride + dz - 1, yi = j * stride + dy - 1, xi = i * stride + dx - 1;
                    if (zi < 0 || yi < 0 || xi < 0 || zi >= d.z || yi >= d.y || xi >= d.x) continue;
                    acc += w.value()[(((co * 2 + ci) * 3 + dz) * 3 + dy) * 3 + dx] *
                           x.value()[ci * d.count() + d.offset(xi, yi, zi)];
                  }
            EXPECT_NEAR(y.value()[co * od.count() + od.offset(i, j, k)], acc, 1e-12);
          }
  }
}

TEST(NN, LinearInstanceNormAffine) {
  auto x = Var<double>::parameter(random_tensor<double>({2, 5}, rng()));
  auto w = Var<double>::parameter(random_tensor<double>({4, 5}, rng()));
  auto b = Var<double>::parameter(random_tensor<double>({4}, rng()));
  EXPECT_LT(gradcheck([&] { return weighted_reduce(ad::linear(x, w, b)); }, {x, w, b}).max_rel, 1e-6);

  auto f = Var<double>::parameter(random_tensor<double>(spatial_shape(2, 3, Dims3{3, 3, 2}), rng()));
  auto s = Var<double>::parameter(random_tensor<double>({6}, rng()));
  auto t = Var<double>::parameter(random_tensor<double>({6}, rng()));
  auto g = [&] { return weighted_reduce(ad::channel_affine(ad::instance_norm(f), s, t)); };
  EXPECT_LT(gradcheck(g, {f, s, t}, 10).max_rel, 1e-5);
}

TEST(NN, ResamplingOps) {
  auto x = Var<double>::parameter(random_tensor<double>(spatial_shape(1, 2, Dims3{4, 4, 2}), rng()));
  const Dims3 up{7, 5, 3};
  EXPECT_LT(gradcheck([&] { return weighted_reduce(ad::resize_trilinear(x, up)); }, {x}, 10).max_rel, 1e-6);
  EXPECT_LT(gradcheck([&] { return weighted_reduce(ad::avg_downsample(x, 2)); }, {x}, 10).max_rel, 1e-6);
  EXPECT_LT(gradcheck([&] { return weighted_reduce(ad::pad_spatial(x, Dims3{6, 5, 4})); }, {x}, 10).max_rel, 1e-6);
  EXPECT_LT(gradcheck([&] { return weighted_reduce(ad::crop_spatial(x, Dims3{3, 2, 2})); }, {x}, 10).max_rel, 1e-6);
  EXPECT_LT(gradcheck([&] { return weighted_reduce(ad::box_sum(x, 1)); }, {x}, 10).max_rel, 1e-6);
  auto y = Var<double>::parameter(random_tensor<double>(spatial_shape(1, 2, Dims3{4, 4, 2}), rng()));
  EXPECT_LT(gradcheck([&] { return weighted_reduce(ad::concat_channels(x, y)); }, {x, y}, 10).max_rel, 1e-6);
}

TEST(NN, ResizeTrilinearIdentityAndCorners) {
  Tensor<double> t(spatial_shape(1, 1, Dims3{3, 2, 2}));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<double>(i * i);
  auto same = ad::resize_trilinear(Var<double>(t), Dims3{3, 2, 2});
  for (Index i = 0; i < t.size(); ++i) EXPECT_DOUBLE_EQ(same.value()[i], t[i]);
  auto up = ad::resize_trilinear(Var<double>(t), Dims3{5, 3, 3});
  // Align-corners resize keeps the eight corner samples.
  EXPECT_DOUBLE_EQ(up.value()[0], t[0]);
  EXPECT_DOUBLE_EQ(up.value()[up.size() - 1], t[t.size() - 1]);
}

TEST(NN, ResizeHalfPixelAlignsVoxelCentres) {
  const Dims3 src{4, 3, 2}, up{8, 6, 4};
  Tensor<double> ramp(spatial_shape(1, 1, src));
  for (Index k = 0; k < src.z; ++k)
    for (Index j = 0; j < src.y; ++j)
      for (Index i = 0; i < src.x; ++i) ramp[src.offset(i, j, k)] = 2.0 * i - j + 0.5 * k;
  const auto out = ad::resize_trilinear(Var<double>(ramp), up, false).value();
  // Output centre o sits at (o + 0.5) / 2 - 0.5 in source voxels, clamped to the grid.
  auto at = [](Index o, Index n) { return std::clamp((o + 0.5) / 2.0 - 0.5, 0.0, n - 1.0); };
  for (Index k = 0; k < up.z; ++k)
    for (Index j = 0; j < up.y; ++j)
      for (Index i = 0; i < up.x; ++i) {
        const double want = 2.0 * at(i, src.x) - at(j, src.y) + 0.5 * at(k, src.z);
        EXPECT_NEAR(out[up.offset(i, j, k)], want, 1e-12);
      }
  auto x = Var<double>::parameter(random_tensor<double>(spatial_shape(1, 2, src), rng()));
  EXPECT_LT(gradcheck([&] { return weighted_reduce(ad::resize_trilinear(x, up, false)); }, {x}, 10).max_rel, 1e-6);
  EXPECT_LT(gradcheck([&] { return weighted_reduce(ad::resize_trilinear(x, Dims3{3, 2, 2}, false)); }, {x}, 10).max_rel,
            1e-6);
}

TEST(NN, BatchOps) {
  const Dims3 d{3, 2, 2};
  auto x = Var<double>::parameter(random_tensor<double>(spatial_shape(1, 2, d), rng()));
  auto y = Var<double>::parameter(random_tensor<double>(spatial_shape(2, 2, d), rng()));
  const auto rep = ad::repeat_batch(x, 3).value();
  const Index per = x.size();
  for (Index b = 0; b < 3; ++b)
    for (Index i = 0; i < per; ++i) EXPECT_EQ(rep[b * per + i], x.value()[i]);
  const auto cat = ad::concat_batch(x, y);
  EXPECT_EQ(cat.shape()[0], 3);
  const auto back = ad::slice_batch(cat, 1, 2).value();
  EXPECT_EQ(back.data, y.value().data);
  EXPECT_THROW(ad::slice_batch(cat, 2, 2), DimensionError);
  EXPECT_THROW(ad::repeat_batch(y, 2), DimensionError);
  EXPECT_LT(gradcheck([&] { return weighted_reduce(ad::repeat_batch(x, 3)); }, {x}, 10).max_rel, 1e-6);
  EXPECT_LT(gradcheck([&] { return weighted_reduce(ad::concat_batch(x, y)); }, {x, y}, 10).max_rel, 1e-6);
  EXPECT_LT(gradcheck([&] { return weighted_reduce(ad::slice_batch(ad::concat_batch(y, x), 1, 2)); }, {x, y}, 10).max_rel,
            1e-6);
}

TEST(NN, WarpGradientsAwayFromKnots) {
  const Dims3 d{5, 4, 4};
  auto src = Var<double>::parameter(random_tensor<double>(spatial_shape(1, 2, d), rng()));
  // Keep displacements off integer knots so the piecewise-linear sampler is differentiable.
  Tensor<double> disp = random_tensor<double>(spatial_shape(1, 3, d), rng(), 0.1, 0.4);
  auto u = Var<double>::parameter(disp);
  auto f = [&] { return weighted_reduce(ad::warp(src, u)); };
  EXPECT_LT(gradcheck(f, {src, u}, 12, 1e-6).max_rel, 1e-5);
}
