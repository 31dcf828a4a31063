#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "sparseattn/errors.h"
#include "sparseattn/rng.h"
#include "sparseattn/tensor_io.h"

using namespace sparseattn;

namespace {
std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("sparseattn_io_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}
}  // namespace

TEST(Spt2, ByteLayout) {
  std::ostringstream os;
  write_spt2(os, Tensor::from_rows({{1.0, 2.0}}));
  const std::string bytes = os.str();
  ASSERT_EQ(bytes.size(), 4u + 4u + 8u + 16u);
  EXPECT_EQ(bytes.substr(0, 4), "SPT2");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 2u);  // rank, little endian
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 1u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 2u);
  // 1.0 = 0x3FF0000000000000, little endian.
  EXPECT_EQ(static_cast<unsigned char>(bytes[16 + 7]), 0x3Fu);
  EXPECT_EQ(static_cast<unsigned char>(bytes[16 + 6]), 0xF0u);
}

TEST(Spt2, RoundTripIsBitExact) {
  Rng rng(1);
  const Tensor t = rng.normal_tensor(5, 7);
  std::stringstream ss;
  write_spt2(ss, t);
  EXPECT_EQ(read_spt2(ss), t);
  Tensor r3({2, 3, 4});
  for (std::size_t i = 0; i < r3.size(); ++i) r3.data()[i] = static_cast<double>(i) / 3.0;
  std::stringstream ss3;
  write_spt2(ss3, r3);
  EXPECT_EQ(read_spt2(ss3), r3);
}

TEST(Spt2, RejectsBadMagicAndTruncation) {
  std::stringstream bad("XXXX");
  EXPECT_THROW(read_spt2(bad), IoError);
  std::ostringstream os;
  write_spt2(os, Tensor::zeros(2, 2));
  std::stringstream cut(os.str().substr(0, 20));
  EXPECT_THROW(read_spt2(cut), IoError);
}

TEST(Csv, RoundTripIsBitExact) {
  Rng rng(2);
  const Tensor t = rng.normal_tensor(4, 3, 1e-3);
  std::stringstream ss;
  write_csv(ss, t);
  EXPECT_EQ(ss.str().substr(0, 9), "c0,c1,c2\n");
  EXPECT_EQ(read_csv(ss), t);
}

TEST(Csv, RejectsMalformed) {
  std::stringstream ragged("c0,c1\n1,2\n3\n");
  EXPECT_THROW(read_csv(ragged), IoError);
  std::stringstream text("c0\nabc\n");
  EXPECT_THROW(read_csv(text), IoError);
  std::stringstream empty("c0\n");
  EXPECT_THROW(read_csv(empty), IoError);
}

TEST(TensorFiles, LoadDispatchesOnExtension) {
  const auto dir = temp_dir("dispatch");
  const Tensor t = Tensor::from_rows({{0.1, 0.2}, {0.3, 0.4}});
  save_csv(dir / "t.csv", t);
  save_spt2(dir / "t.spt2", t);
  EXPECT_EQ(load_tensor(dir / "t.csv"), t);
  EXPECT_EQ(load_tensor(dir / "t.spt2"), t);
}

TEST(TensorFiles, MissingFileNamesThePath) {
  try {
    (void)load_tensor("/nonexistent/dir/file.spt2");
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/file.spt2"), std::string::npos);
  }
}

TEST(FormatDouble, ShortestRoundTrip) {
  EXPECT_EQ(format_double(0.1), "0.1");
  EXPECT_EQ(format_double(1.0), "1");
  const double x = 1.0 / 3.0;
  EXPECT_EQ(std::stod(format_double(x)), x);
}
