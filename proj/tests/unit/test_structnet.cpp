#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "fost/errors.hpp"
#include "fost/grad_check.hpp"
#include "fost/ops.hpp"
#include "fost/structnet.hpp"
#include "test_util.hpp"

using namespace fost;
using fost::test::max_abs_diff;
using fost::test::random_tensor;
using fost::test::values;

namespace {

NetworkConfig small_config() {
  NetworkConfig c;
  c.stage_channels = {2, 3};
  c.fc_dims = {4};
  c.num_classes = 3;
  c.input.height = 8;
  c.input.width = 8;
  return c;
}

double mean_of(std::span<const double> v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

}  // namespace

TEST_CASE("default shapes") {
  StructNet net(NetworkConfig{}, 3);
  Rng rng(1);
  const FeatureBundle f = net.forward_features(random_tensor({2, 1, 32, 32}, rng), DomainId::source, Mode::training);
  REQUIRE(f.stage_maps.size() == 3);
  CHECK(f.stage_maps[0].shape() == Shape{2, 8, 16, 16});
  CHECK(f.stage_maps[1].shape() == Shape{2, 16, 8, 8});
  CHECK(f.stage_maps[2].shape() == Shape{2, 32, 4, 4});
  CHECK(f.f_struc.shape() == Shape{2, 56, 4, 4});
  CHECK(f.f_vec.shape() == Shape{2, 56});
  REQUIRE(f.fc_features.size() == 2);
  CHECK(f.fc_features[0].shape() == Shape{2, 64});
  CHECK(f.fc_features[1].shape() == Shape{2, 32});
  CHECK(f.logits.shape() == Shape{2, 4});

  CHECK_THROWS_AS(net.forward_features(Tensor::zeros({2, 1, 16, 16}), DomainId::source, Mode::training),
                  ShapeMismatch);
}

TEST_CASE("fusion toggles change the fused width") {
  NetworkConfig c;
  CHECK(c.fused_channels() == 56);
  c.fuse_s2 = false;
  CHECK(c.fused_channels() == 48);
  c.fuse_s3 = false;
  CHECK(c.fused_channels() == 32);
  c.fuse_s4 = false;
  CHECK(c.fused_channels() == 32);
  StructNet net(c, 1);
  const FeatureBundle f = net.forward_features(Tensor::zeros({1, 1, 32, 32}), DomainId::target, Mode::training);
  CHECK(f.f_vec.shape() == Shape{1, 32});
}

TEST_CASE("zero images give zero features and logits") {
  StructNet net(NetworkConfig{}, 9);
  const FeatureBundle f = net.forward_features(Tensor::zeros({3, 1, 32, 32}), DomainId::source, Mode::training);
  for (double v : f.f_vec.data()) CHECK(v == 0.0);
  for (double v : f.logits.data()) CHECK(v == 0.0);
}

TEST_CASE("invalid configurations") {
  NetworkConfig c;
  c.stage_channels.clear();
  CHECK_THROWS_AS(c.validate(), InvalidConfig);
  c = NetworkConfig{};
  c.fc_dims.clear();
  CHECK_THROWS_AS(c.validate(), InvalidConfig);
  c = NetworkConfig{};
  c.kernel_size = 4;
  CHECK_THROWS_AS(c.validate(), InvalidConfig);
  c = NetworkConfig{};
  c.input.height = 4;
  CHECK_THROWS_AS(StructNet(c, 1), InvalidConfig);
}

TEST_CASE("conv_norm on a batch with mean 2 and std 4") {
  DomainNormState state(1, 1e-10);
  const Tensor batch = Tensor::from({4, 1, 1, 1}, {-2.0, -2.0, 6.0, 6.0});
  const Tensor out = conv_norm_update_and_apply(state, batch, DomainId::source, true);
  const auto v = values(out);
  CHECK(std::abs(mean_of(v)) < 1e-10);
  double var = 0.0;
  for (double x : v) var += x * x / 4.0;
  CHECK(std::abs(var - 1.0) < 1e-10);

  CHECK(state.stats(DomainId::source).mean[0] == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(state.stats(DomainId::source).variance[0] == doctest::Approx(0.9 + 1.6).epsilon(1e-15));
  CHECK(state.stats(DomainId::target).mean[0] == 0.0);
  CHECK(state.stats(DomainId::target).variance[0] == 1.0);

  const Tensor eval = conv_norm_update_and_apply(state, Tensor::from({1, 1, 1, 1}, {0.2}), DomainId::source, false);
  CHECK(std::abs(eval.item()) < 1e-15);
}

TEST_CASE("conv_norm on a constant batch gives zeros") {
  DomainNormState state(2, 1e-10);
  const Tensor out = conv_norm_update_and_apply(state, Tensor::full({3, 2, 2, 2}, 5.0), DomainId::target, true);
  for (double v : out.data()) CHECK(std::abs(v) < 1e-12);
  CHECK_THROWS_AS(conv_norm_update_and_apply(state, Tensor::zeros({3, 4, 2, 2}), DomainId::target, true),
                  ShapeMismatch);
}

TEST_CASE("domains keep separate statistics over shared weights") {
  StructNet net(small_config(), 4);
  Rng rng(5);
  const Tensor xs = random_tensor({6, 1, 8, 8}, rng, false, 0.0, 1.0);
  const Tensor xt = random_tensor({6, 1, 8, 8}, rng, false, 2.0, 3.0);
  const auto checksum = net.parameter_checksum();
  net.forward_features(xs, DomainId::source, Mode::training);
  const auto source_mean = net.norms()[0].stats(DomainId::source).mean;
  CHECK(net.norms()[0].stats(DomainId::target).mean[0] == 0.0);
  net.forward_features(xt, DomainId::target, Mode::training);
  CHECK(net.norms()[0].stats(DomainId::source).mean == source_mean);
  CHECK(net.norms()[0].stats(DomainId::target).mean[0] > 0.2);
  CHECK(net.parameter_checksum() == checksum);

  // Training mode uses batch statistics, so the domain only selects which
  // running statistics get updated.
  const auto a = values(net.forward_features(xt, DomainId::source, Mode::training).logits);
  const auto b = values(net.forward_features(xt, DomainId::target, Mode::training).logits);
  CHECK(a == b);
  const auto c = values(net.forward_features(xt, DomainId::source, Mode::evaluation).logits);
  const auto d = values(net.forward_features(xt, DomainId::target, Mode::evaluation).logits);
  CHECK(c != d);
}

TEST_CASE("two domains with means 0 and 3 both normalise to zero mean") {
  DomainNormState state(1, 1e-10, 0.0);
  Rng rng(2);
  const Tensor s = random_tensor({8, 1, 2, 2}, rng, false, -1.0, 1.0);
  const Tensor t = ops::add_scalar(s, 3.0);
  const auto ns = values(conv_norm_update_and_apply(state, s, DomainId::source, true));
  const auto nt = values(conv_norm_update_and_apply(state, t, DomainId::target, true));
  CHECK(max_abs_diff(ns, nt) < 1e-12);
  CHECK(state.stats(DomainId::target).mean[0] - state.stats(DomainId::source).mean[0] ==
        doctest::Approx(3.0).epsilon(1e-12));
  const auto es = values(conv_norm_update_and_apply(state, s, DomainId::source, false));
  const auto et = values(conv_norm_update_and_apply(state, t, DomainId::target, false));
  CHECK(max_abs_diff(es, et) < 1e-9);
}

TEST_CASE("structure fusion") {
  const Tensor s2 = Tensor::from({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
  const Tensor s3 = Tensor::from({1, 1, 1, 1}, {7.0});
  const std::vector<Tensor> maps{s2, s3};
  CHECK(values(structure_fusion(maps, {true, true})) == std::vector<double>{2.5, 7.0});
  CHECK(values(structure_fusion(maps, {false, true})) == std::vector<double>{7.0});
  CHECK_THROWS_AS(structure_fusion(maps, {true, false}), NoMapsEnabled);
  CHECK_THROWS_AS(structure_fusion({}, {}), NoMapsEnabled);

  Rng rng(3);
  const Tensor only = random_tensor({2, 3, 4, 4}, rng);
  CHECK(values(structure_fusion(std::vector<Tensor>{only}, {true})) == values(only));
}

TEST_CASE("property: permuting the batch permutes the outputs") {
  StructNet net(small_config(), 11);
  Rng rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 3 + trial % 4;
    const Tensor x = random_tensor({n, 1, 8, 8}, rng);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const Tensor px = ops::gather_rows(x, perm);
    const Tensor a = net.forward_features(x, DomainId::source, Mode::training).logits;
    const Tensor b = net.forward_features(px, DomainId::source, Mode::training).logits;
    const std::size_t c = a.dim(1);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < c; ++k) CHECK(std::abs(b.at(i * c + k) - a.at(perm[i] * c + k)) < 1e-12);
  }
}

TEST_CASE("logit gradients match finite differences") {
  StructNet net(small_config(), 21);
  Rng rng(22);
  const Tensor x = random_tensor({4, 1, 8, 8}, rng);
  const Tensor probe = random_tensor({4, 3}, rng);
  const auto loss = [&] {
    return ops::sum(ops::mul(net.forward_features(x, DomainId::source, Mode::training).logits, probe));
  };
  const Gradients g = backward(loss());
  ops::ReluPatternLock lock;
  loss();
  lock.lock();
  for (Tensor& p : net.parameters()) {
    const auto fd = finite_difference_gradient(
        [&] {
          lock.rewind();
          return loss().item();
        },
        p, 1e-5);
    const auto cmp = compare_gradients(g.of(p), fd, 1e-4, 1e-8);
    CHECK_MESSAGE(cmp.passed, "rel " << cmp.max_relative_error << " at " << cmp.worst_index);
  }
}

TEST_CASE("checkpoint roundtrip") {
  const auto dir = std::filesystem::temp_directory_path() / "fost_test_structnet";
  std::filesystem::create_directories(dir);
  NetworkConfig c = small_config();
  c.fuse_s2 = false;
  StructNet net(c, 31);
  Rng rng(32);
  const Tensor x = random_tensor({5, 1, 8, 8}, rng);
  net.forward_features(x, DomainId::target, Mode::training);
  net.save(dir / "net.fstn");

  StructNet back = StructNet::load(dir / "net.fstn");
  CHECK(back.parameter_checksum() == net.parameter_checksum());
  CHECK(back.config().fuse_s2 == false);
  CHECK(back.config().stage_channels == c.stage_channels);
  for (DomainId d : {DomainId::source, DomainId::target}) {
    CHECK(values(back.forward_features(x, d, Mode::evaluation).logits) ==
          values(net.forward_features(x, d, Mode::evaluation).logits));
  }

  {
    std::ofstream bad(dir / "bad.fstn", std::ios::binary);
    bad << "NOPE";
  }
  CHECK_THROWS_AS(StructNet::load(dir / "bad.fstn"), CheckpointError);
  std::filesystem::resize_file(dir / "net.fstn", 40);
  CHECK_THROWS_AS(StructNet::load(dir / "net.fstn"), CheckpointError);
  CHECK_THROWS_AS(StructNet::load(dir / "missing.fstn"), CheckpointError);
  std::filesystem::remove_all(dir);
}

// With a zero background the zero padding is indistinguishable from the
// image, so a shift by the full stride moves the deepest map by one cell.
TEST_CASE("pooled deep features ignore a translation by one pooling window") {
  NetworkConfig c;
  c.fuse_s2 = false;
  c.fuse_s3 = false;
  StructNet net(c, 41);
  const auto image = [](std::size_t dx) {
    std::vector<double> v(32 * 32, 0.0);
    for (std::size_t y = 12; y < 18; ++y)
      for (std::size_t x = 9; x < 15; ++x) v[y * 32 + x + dx] = 0.9;
    return v;
  };
  std::vector<double> both = image(0);
  const auto shifted = image(8);
  both.insert(both.end(), shifted.begin(), shifted.end());
  const Tensor x = Tensor::from({2, 1, 32, 32}, both);
  const Tensor f = net.forward_features(x, DomainId::source, Mode::evaluation).f_vec;
  const std::size_t d = f.dim(1);
  for (std::size_t k = 0; k < d; ++k) CHECK(std::abs(f.at(k) - f.at(d + k)) < 1e-6);
}
