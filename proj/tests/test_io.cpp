#include <gtest/gtest.h>

#include <filesystem>
#include <string>

#include "caap/error.hpp"
#include "caap/io.hpp"
#include "caap/toy.hpp"

using namespace caap;
namespace fs = std::filesystem;

namespace {

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("caap_io_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

TensorContainer three_tensors() {
  TensorContainer c;
  c.tensors.emplace_back("a", Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  c.tensors.emplace_back("b.weight", Tensor({1}, {-0.125f}));
  c.tensors.emplace_back("c", Tensor({2, 1, 2}, {1e-30f, 3.5f, -7.0f, 1e30f}));
  c.metadata["note"] = "x";
  return c;
}

std::string error_text(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Container, RoundTripIsBitwise) {
  const TensorContainer c = three_tensors();
  const TensorContainer back = decode_container(encode_container(c));
  ASSERT_EQ(back.tensors.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.tensors[i].first, c.tensors[i].first);
    EXPECT_EQ(back.tensors[i].second.shape, c.tensors[i].second.shape);
    EXPECT_EQ(back.tensors[i].second.data, c.tensors[i].second.data);
  }
  EXPECT_EQ(back.metadata, c.metadata);
  EXPECT_EQ(encode_container(back), encode_container(c));
}

TEST(Container, LayoutStartsWithMagicAndLength) {
  const std::string bytes = encode_container(three_tensors());
  EXPECT_EQ(bytes.substr(0, 6), "VITW1\n");
  std::uint64_t len = 0;
  for (int i = 7; i >= 0; --i) len = (len << 8) | static_cast<unsigned char>(bytes[6 + static_cast<std::size_t>(i)]);
  const Json header = Json::parse(bytes.substr(14, len));
  EXPECT_EQ(header["tensors"][1]["name"], "b.weight");
  EXPECT_EQ(header["tensors"][1]["dtype"], "f32");
  EXPECT_EQ(bytes.size(), 14 + len + 4 * (6 + 1 + 4) + 8);
}

TEST(Container, EmptyListRoundTrips) {
  const TensorContainer back = decode_container(encode_container(TensorContainer{}));
  EXPECT_TRUE(back.tensors.empty());
}

TEST(Container, FlippedPayloadByteFailsChecksum) {
  std::string bytes = encode_container(three_tensors());
  bytes[bytes.size() - 12] ^= 0x01;
  const std::string msg = error_text([&] { decode_container(bytes); });
  EXPECT_NE(msg.find("checksum mismatch at offset"), std::string::npos) << msg;
}

TEST(Container, TruncationAndMagicAreReported) {
  const std::string bytes = encode_container(three_tensors());
  for (std::size_t cut : {std::size_t{3}, std::size_t{10}, std::size_t{40}, bytes.size() - 20, bytes.size() - 1}) {
    const std::string msg = error_text([&] { decode_container(bytes.substr(0, cut)); });
    EXPECT_NE(msg.find("offset"), std::string::npos) << cut << ": " << msg;
  }
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_NE(error_text([&] { decode_container(bad); }).find("bad magic"), std::string::npos);
  EXPECT_NE(error_text([&] { decode_container(bytes + "z"); }).find("trailing"), std::string::npos);
}

TEST(Container, UnknownDtypeAndDuplicates) {
  std::string bytes = encode_container(three_tensors());
  const std::size_t at = bytes.find("\"f32\"");
  bytes.replace(at, 5, "\"f16\"");
  EXPECT_NE(error_text([&] { decode_container(bytes); }).find("unknown dtype"), std::string::npos);
  TensorContainer dup = three_tensors();
  dup.tensors.emplace_back("a", Tensor({1}, {0.0f}));
  EXPECT_THROW(encode_container(dup), Error);
}

TEST_F(TempDir, ModelSaveLoadKeepsFingerprint) {
  ToySpec spec;
  spec.config.channels = 1;
  const ModelBundle m = gen_model(spec);
  save_model(path("m.vitw"), m);
  const ModelBundle back = load_model(path("m.vitw"));
  EXPECT_EQ(back.fingerprint(), m.fingerprint());
  EXPECT_EQ(back.config, m.config);
  EXPECT_THROW(load_model(path("missing.vitw")), Error);
}

TEST(Pgm, ExampleGraymap) {
  const Image img = decode_pgm("P2 2 2 255\n0 255\n255 0\n");
  EXPECT_EQ(img.channels, 1);
  EXPECT_EQ(img.data, (std::vector<float>{0, 1, 1, 0}));
}

TEST(Pgm, CommentsAndErrors) {
  EXPECT_EQ(decode_pgm("P2\n# c\n1 1\n255\n51\n").data, std::vector<float>{0.2f});
  EXPECT_NE(error_text([] { decode_pgm("P2 2 2 255\n0 255\n255\n"); }).find("truncated"), std::string::npos);
  EXPECT_NE(error_text([] { decode_pgm("P2 1 1 65535\n9\n"); }).find("bit depth"), std::string::npos);
  EXPECT_NE(error_text([] { decode_pgm("P2 1 1 255\n\n300\n"); }).find("line 3"), std::string::npos);
  EXPECT_THROW(decode_pgm("P5 1 1 255\n0"), Error);
}

TEST_F(TempDir, PngAllWhiteLoadsAsOne) {
  save_image(path("w.png"), Image(4, 6, 3, 1.0f));
  const Image img = load_image(path("w.png"));
  EXPECT_EQ(img.height, 4);
  EXPECT_EQ(img.width, 6);
  EXPECT_EQ(img.channels, 3);
  EXPECT_EQ(img.data, std::vector<float>(72, 1.0f));
}

TEST_F(TempDir, SaveLoadRoundTripWithinQuantization) {
  Image img(5, 5, 3);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>((i * 37) % 101) / 100.0f;
  for (const char* name : {"r.png"}) {
    save_image(path(name), img);
    const Image back = load_image(path(name));
    ASSERT_TRUE(back.same_shape(img));
    for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_LE(std::abs(back.data[i] - img.data[i]), 0.5f / 255.0f + 1e-7f);
  }
  Image gray(3, 4, 1);
  for (std::size_t i = 0; i < gray.data.size(); ++i) gray.data[i] = static_cast<float>(i) / 11.0f;
  for (const char* name : {"g.png", "g.pgm"}) {
    save_image(path(name), gray);
    const Image back = load_image(path(name));
    ASSERT_TRUE(back.same_shape(gray)) << name;
    for (std::size_t i = 0; i < gray.data.size(); ++i) EXPECT_LE(std::abs(back.data[i] - gray.data[i]), 0.5f / 255.0f + 1e-7f);
  }
  EXPECT_THROW(save_image(path("x.bmp"), gray), Error);
}

TEST_F(TempDir, SixteenBitPngIsRejected) {
  save_image(path("g.png"), Image(2, 2, 1, 0.5f));
  std::string bytes = read_file(path("g.png"));
  bytes[24] = 16;
  EXPECT_NE(error_text([&] { decode_png(bytes); }).find("bit depth 16"), std::string::npos);
  EXPECT_THROW(decode_png("\x89PNG"), Error);
}

TEST(Mask, CheckerboardMajority) {
  // 2px checkerboard cells aligned with 2px patches.
  SegMask m(8, 8);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) m.set(y, x, ((y / 2) + (x / 2)) % 2 == 0);
  const auto major = m.patch_majority(2);
  for (int p = 0; p < 16; ++p) EXPECT_EQ(major[static_cast<std::size_t>(p)], ((p / 4) + (p % 4)) % 2 == 0 ? 1 : 0);
  const auto full = SegMask(8, 8, 1).patch_majority(2);
  EXPECT_EQ(full, std::vector<std::uint8_t>(16, 1));
  // Exactly half is not a majority.
  SegMask half(2, 2);
  half.set(0, 0, true);
  half.set(0, 1, true);
  EXPECT_EQ(half.patch_majority(2), std::vector<std::uint8_t>{0});
}

TEST(Mask, NonzeroAnyChannelIsForeground) {
  Image img(1, 3, 3, 0.0f);
  img.at(0, 1, 2) = 1.0f / 255.0f;
  const SegMask m = mask_from_image(img);
  EXPECT_EQ(m.pixels, (std::vector<std::uint8_t>{0, 1, 0}));
}

TEST_F(TempDir, MapFileRoundTripIsExact) {
  const ModelBundle model = gen_model(ToySpec{});
  const auto [x, x0] = gen_planted_pair(ToySpec{}, 5);
  PatchRequest req;
  req.class_id = 2;
  req.range = {1, 4};
  req.select = SelectionOp::manhattan(1);
  req.blank = BlankSpec::of(BlankSpec::Kind::kBlurNoisy);
  req.blank.seed = 9;
  MapFile f;
  f.map = caap_parallel(model, forward_full(model, x), forward_full(model, x0), req);
  f.run_config["mode"] = "parallel";
  write_map_file(path("m.json"), f);
  const MapFile back = read_map_file(path("m.json"));
  EXPECT_EQ(back.map, f.map);
  EXPECT_EQ(back.run_config, f.run_config);
  EXPECT_EQ(map_to_json(back.map).dump(), map_to_json(f.map).dump());
}

TEST(MapJson, RejectsMalformed) {
  AttributionMap m;
  m.grid = 2;
  m.scores = VectorF::Constant(4, 0.5f);
  Json j = map_to_json(m);
  EXPECT_EQ(j["format"], "caap-map/1");
  Json bad = j;
  bad["scores"][1] = Json::array({0.1});
  EXPECT_THROW(map_from_json(bad), Error);
  bad = j;
  bad["format"] = "other";
  EXPECT_THROW(map_from_json(bad), Error);
  m.scores(3) = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(map_to_json(m), Error);
}

TEST(Heatmap, PatchConstantGraymap) {
  AttributionMap m;
  m.grid = 2;
  m.scores.resize(4);
  m.scores << 0.0f, 1.0f, 0.5f, 0.25f;
  const Image img = decode_pgm(render_heatmap(m, 2, {"mode=parallel"}));
  EXPECT_EQ(img.height, 4);
  EXPECT_EQ(img.at(0, 0, 0), 0.0f);
  EXPECT_EQ(img.at(1, 3, 0), 1.0f);
  EXPECT_EQ(img.at(3, 3, 0), 64.0f / 255.0f);
  EXPECT_EQ(render_heatmap(m, 2, {"mode=parallel"}).substr(0, 17), "P2\n# mode=paralle");
}

TEST(Hex, RoundTrip) {
  EXPECT_EQ(to_hex(0xabcULL), "0000000000000abc");
  EXPECT_EQ(from_hex(to_hex(0x7d1e8a57cb393c2cULL)), 0x7d1e8a57cb393c2cULL);
  EXPECT_THROW(from_hex("xyz"), Error);
}

TEST_F(TempDir, CommentsAreEmbedded) {
  save_image(path("c.png"), Image(2, 2, 3, 0.25f), {"run {\"a\":1}"});
  const std::string bytes = read_file(path("c.png"));
  EXPECT_NE(bytes.find(std::string("tEXtComment") + '\0' + "run {\"a\":1}"), std::string::npos);
  EXPECT_EQ(load_image(path("c.png")), load_image(path("c.png")));
  EXPECT_EQ(load_image(path("c.png")).data, std::vector<float>(12, 64.0f / 255.0f));
  save_image(path("c.pgm"), Image(1, 1, 1, 1.0f), {"hello"});
  EXPECT_EQ(read_file(path("c.pgm")), "P2\n# hello\n1 1\n255\n255\n");
}
