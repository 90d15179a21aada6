#include <gtest/gtest.h>

#include <fstream>

#include "erasenet/checkpoint.hpp"
#include "support/helpers.hpp"

using namespace erasenet;
using erasenet::testing::random_tensor;
using erasenet::testing::TempDir;
using Code = CheckpointError::Code;

namespace {

// A model and optimizer state that have moved away from their defaults.
struct Trained {
  ModelGraph<float> model;
  TrainState state;

  Trained(Variant v, std::uint64_t seed) : model(build_erasenet(v, 0.125, seed)) {
    state.rng = Rng(seed);
    state.adam.init(model.parameters());
    auto params = model.parameters();
    const auto x = random_tensor<float>({2, 1, 16, 16}, seed, 0, 1);
    for (int k = 0; k < 2; ++k) {
      model.zero_grad();
      mse_loss(model.forward(x, Mode::Train, &state.rng), x).backward();
      adam_step(params, state.adam);
    }
    state.plateau.best = 0.125;
    state.plateau.counter = 3;
    state.epoch = 7;
    state.step = 2;
    state.best_val = 0.1;
  }
};

Code code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const CheckpointError& e) {
    return e.code();
  }
  ADD_FAILURE() << "no CheckpointError";
  return Code::Io;
}

}  // namespace

TEST(Checkpoint, ByteLayoutMatchesFormat) {
  Checkpoint c;
  c.variant = Variant::EraseNet3;
  const float v[] = {1.0f, -2.0f};
  c.put_floats<float>("w", {2}, std::span<const float>(v));
  // little-endian layout and CRC-32 computed independently
  const unsigned char expect[] = {0x45, 0x52, 0x53, 0x4e, 0x01, 0x00, 0x00, 0x00, 0x03, 0x01, 0x00,
                                  0x00, 0x00, 0x01, 0x00, 0x77, 0x01, 0x02, 0x00, 0x00, 0x00, 0x00,
                                  0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0, 0x99, 0x89, 0x99, 0xd0};
  const std::string bytes = encode_checkpoint(c);
  ASSERT_EQ(bytes.size(), sizeof(expect));
  for (std::size_t i = 0; i < bytes.size(); ++i) EXPECT_EQ(static_cast<unsigned char>(bytes[i]), expect[i]) << i;
  EXPECT_EQ(decode_checkpoint(bytes), c);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  TempDir dir("ckpt");
  Trained t(Variant::EraseNet4, 3);
  const auto c = capture(t.model, &t.state);
  save_checkpoint(c, dir / "a.ckpt");
  EXPECT_FALSE(fs::exists(dir / "a.ckpt.tmp"));
  const auto loaded = load_checkpoint(dir / "a.ckpt");
  EXPECT_EQ(loaded, c);

  // into a fresh model and state, then out again
  auto fresh = build_erasenet(Variant::EraseNet4, 0.125, 99);
  TrainState st;
  restore(loaded, fresh, &st);
  EXPECT_EQ(encode_checkpoint(capture(fresh, &st)), encode_checkpoint(c));
  EXPECT_EQ(st.rng, t.state.rng);
  EXPECT_EQ(st.adam.t, t.state.adam.t);
  EXPECT_EQ(st.adam.m, t.state.adam.m);
  EXPECT_EQ(st.plateau.counter, 3u);
  EXPECT_EQ(st.epoch, 7u);

  // resumed streams continue identically
  EXPECT_EQ(st.rng.next_u64(), t.state.rng.next_u64());
  const auto x = random_tensor<float>({1, 1, 16, 16}, 5, 0, 1);
  const auto a = t.model.forward(x, Mode::Infer), b = fresh.forward(x, Mode::Infer);
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(a.data()[i], b.data()[i]);
}

TEST(Checkpoint, TruncationDetected) {
  Trained t(Variant::EraseNet3, 4);
  const std::string bytes = encode_checkpoint(capture(t.model, &t.state));
  for (std::size_t cut : {bytes.size() / 2, bytes.size() - 5, std::size_t{20}, std::size_t{9}}) {
    EXPECT_EQ(code_of([&] { decode_checkpoint(bytes.substr(0, cut)); }), Code::Truncated) << cut;
  }
  EXPECT_EQ(code_of([&] { decode_checkpoint(bytes.substr(0, bytes.size() - 1)); }), Code::Truncated);
}

TEST(Checkpoint, TruncatedFileLeavesModelUntouched) {
  TempDir dir("trunc");
  Trained src(Variant::EraseNet4, 5);
  std::string bytes = encode_checkpoint(capture(src.model));
  {
    std::ofstream out(dir / "t.ckpt", std::ios::binary);
    out << bytes.substr(0, bytes.size() / 3);
  }
  auto model = build_erasenet(Variant::EraseNet4, 0.125, 1);
  const auto before = encode_checkpoint(capture(model));
  EXPECT_EQ(code_of([&] { restore(load_checkpoint(dir / "t.ckpt"), model); }), Code::Truncated);
  EXPECT_EQ(encode_checkpoint(capture(model)), before);
}

TEST(Checkpoint, DistinctErrorCodes) {
  Trained t(Variant::EraseNet3, 6);
  const std::string good = encode_checkpoint(capture(t.model));

  std::string magic = good;
  magic[0] = 'X';
  EXPECT_EQ(code_of([&] { decode_checkpoint(magic); }), Code::BadMagic);

  std::string version = good;
  version[4] = 2;
  EXPECT_EQ(code_of([&] { decode_checkpoint(version); }), Code::BadVersion);

  std::string flipped = good;
  flipped[good.size() / 2] ^= 0x10;
  EXPECT_EQ(code_of([&] { decode_checkpoint(flipped); }), Code::CrcMismatch);

  auto e4 = build_erasenet(Variant::EraseNet4, 0.125);
  EXPECT_EQ(code_of([&] { restore(decode_checkpoint(good), e4); }), Code::VariantMismatch);

  auto c = decode_checkpoint(good);
  c.put_u64("enc.block9.bn0.updates", 1);
  auto e3 = build_erasenet(Variant::EraseNet3, 0.125);
  const auto before = encode_checkpoint(capture(e3));
  EXPECT_EQ(code_of([&] { restore(c, e3); }), Code::UnknownName);
  EXPECT_EQ(encode_checkpoint(capture(e3)), before);

  auto missing = decode_checkpoint(good);
  missing.entries.erase(missing.entries.begin() + 3);
  EXPECT_EQ(code_of([&] { restore(missing, e3); }), Code::MissingName);

  auto wide = build_erasenet(Variant::EraseNet3, 0.25);
  EXPECT_EQ(code_of([&] { restore(decode_checkpoint(good), wide); }), Code::ShapeMismatch);

  EXPECT_EQ(code_of([&] { load_checkpoint("/nonexistent/x.ckpt"); }), Code::Io);
}

TEST(Checkpoint, ModelOnlyCheckpointCannotResumeTraining) {
  Trained t(Variant::EraseNet3, 7);
  const auto c = capture(t.model);
  auto m = build_erasenet(Variant::EraseNet3, 0.125);
  restore(c, m);  // weights alone are fine
  TrainState st;
  EXPECT_EQ(code_of([&] { restore(c, m, &st); }), Code::MissingName);
}
