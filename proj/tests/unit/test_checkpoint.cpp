#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "oracles.hpp"
#include "ugp/engine.hpp"
#include "ugp/errors.hpp"

using namespace ugp;

TEST(Checkpoint, ByteLayoutOfATinyArchive) {
  TensorArchive a;
  a.emplace("b", Tensor::vector({1.0}));
  a.emplace("a", Tensor::vector({0.5, -2.0}));
  // Hand-assembled from the layout: magic, u32 version, then "a" before "b".
  const std::vector<std::uint8_t> expected = {
      'U', 'G', 'P', 'C', 0x01, 0x00, 0x00, 0x00,                  // header
      0x01, 0x00, 'a', 0x01, 0x02, 0x00, 0x00, 0x00,               // name "a", rank 1, dim 2
      0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0xe0, 0x3f,              // 0.5
      0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0xc0,              // -2.0
      0x01, 0x00, 'b', 0x01, 0x01, 0x00, 0x00, 0x00,               // name "b", rank 1, dim 1
      0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0xf0, 0x3f};             // 1.0
  EXPECT_EQ(encode_archive(a), expected);
  EXPECT_EQ(decode_archive(expected), a);
}

TEST(Checkpoint, RoundTripIsExactIncludingSpecialValues) {
  TensorArchive a;
  a.emplace("x", Tensor({2, 3}, {0.1, -0.0, 1e-310, std::numeric_limits<double>::max(), -7.25, 3.0}));
  a.emplace("y/z", Tensor({1, 1, 1}, {42.0}));
  const auto back = decode_archive(encode_archive(a));
  ASSERT_EQ(back, a);
  EXPECT_TRUE(std::signbit(back.at("x")[1]));
}

TEST(Checkpoint, MalformedBytesAreFormatErrors) {
  TensorArchive a;
  a.emplace("x", Tensor::vector({1.0, 2.0}));
  auto bytes = encode_archive(a);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_archive(bad_magic), FormatError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(decode_archive(bad_version), FormatError);
  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_THROW(decode_archive(truncated), FormatError);
}

TEST(Checkpoint, OutOfOrderNamesAreRejected) {
  TensorArchive a;
  a.emplace("b", Tensor::vector({1.0}));
  TensorArchive c;
  c.emplace("a", Tensor::vector({1.0}));
  auto bytes = encode_archive(a);
  const auto tail = encode_archive(c);
  bytes.insert(bytes.end(), tail.begin() + 8, tail.end());
  EXPECT_THROW(decode_archive(bytes), FormatError);
}

TEST(Checkpoint, NetworkRoundTripKeepsEveryTensorAndVersion) {
  const std::vector<LayerSpec> trunk = {LayerSpec::conv(2, 3, 2), LayerSpec::relu(), LayerSpec::dense(5),
                                        LayerSpec::relu()};
  NetworkParams p = build_network(trunk, {4, 7, 7}, {{"a", 3}, {"b", 2}}, 9);
  p.version = 1234;
  TensorArchive archive;
  export_network(p, archive);
  EXPECT_EQ(archive_at(archive, "_meta/version")[0], 1234.0);
  const NetworkParams q = import_network(archive);
  EXPECT_EQ(q.version, 1234u);
  EXPECT_EQ(q.input_shape, p.input_shape);
  ASSERT_EQ(q.tensor_names(), p.tensor_names());
  for (const auto& name : p.tensor_names()) EXPECT_EQ(*q.find(name), *p.find(name)) << name;
  ASSERT_EQ(q.trunk.size(), p.trunk.size());
  for (std::size_t i = 0; i < p.trunk.size(); ++i) EXPECT_EQ(q.trunk[i].spec, p.trunk[i].spec);
}

TEST(Checkpoint, MissingTensorIsReported) {
  NetworkParams p = build_network(std::vector<LayerSpec>{LayerSpec::dense(3)}, {2}, {{"a", 2}}, 1);
  TensorArchive archive;
  export_network(p, archive);
  archive.erase("head/a/value/bias");
  EXPECT_THROW(import_network(archive), FormatError);
}

TEST(Checkpoint, AgentFileRoundTripsParamsOptimizerAndAnchors) {
  Agent agent;
  agent.params = build_network(std::vector<LayerSpec>{LayerSpec::dense(3), LayerSpec::relu()}, {4, 2},
                               {{"a", 2}}, 2);
  agent.optimizer.learning_rate = 0.005;
  GradientSet g;
  g.accumulate("trunk/0/bias", Tensor::vector({0.1, 0.2, 0.3}));
  apply(agent.params, g, agent.optimizer);
  EwcAnchor anchor;
  anchor.lambda = 50.0;
  anchor.theta_star.emplace("trunk/0/bias", *agent.params.find("trunk/0/bias"));
  anchor.fisher.emplace("trunk/0/bias", Tensor::vector({1.0, 2.0, 3.0}));
  agent.anchors.push_back(anchor);

  const auto path = ugp::testing::scratch_dir("checkpoint") / "agent.ugpc";
  agent.save(path);
  const Agent back = Agent::load(path);
  EXPECT_EQ(back.params.version, 1u);
  EXPECT_EQ(*back.params.find("trunk/0/bias"), *agent.params.find("trunk/0/bias"));
  EXPECT_EQ(back.optimizer.learning_rate, 0.005);
  EXPECT_EQ(back.optimizer.accumulators, agent.optimizer.accumulators);
  ASSERT_EQ(back.anchors.size(), 1u);
  EXPECT_EQ(back.anchors[0].fisher, anchor.fisher);
  EXPECT_EQ(back.anchors[0].lambda, 50.0);
  // Saving the loaded agent reproduces the file byte for byte.
  const auto again = path.parent_path() / "again.ugpc";
  back.save(again);
  EXPECT_EQ(ugp::testing::read_bytes(path), ugp::testing::read_bytes(again));
}
