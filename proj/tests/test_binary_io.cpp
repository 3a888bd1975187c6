#include <gtest/gtest.h>

#include <cmath>

#include "actrm/binary_io.hpp"
#include "test_util.hpp"

namespace actrm {
namespace {

std::span<const std::uint8_t> as_bytes(std::string_view s) {
  return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

TEST(Hashes, KnownVectors) {
  EXPECT_EQ(crc32_of(as_bytes("123456789")), 0xCBF43926u);
  EXPECT_EQ(to_hex(sha256_of("abc")), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(to_hex(sha256_of("")), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(ByteWriter, LittleEndianLayout) {
  ByteWriter w;
  w.u16(0x0102);
  w.u32(0x03040506);
  w.f32(1.0f);
  const std::vector<std::uint8_t> want = {0x02, 0x01, 0x06, 0x05, 0x04, 0x03, 0x00, 0x00, 0x80, 0x3f};
  EXPECT_EQ(w.bytes(), want);
}

TEST(ByteReader, RoundTripsEveryWidth) {
  ByteWriter w;
  w.u8(7);
  w.u16(65535);
  w.u32(0xdeadbeef);
  w.u64(0x0123456789abcdefull);
  w.f32(-2.5f);
  w.f64(std::nextafter(1.0, 2.0));
  w.str("hello");
  ByteReader r(w.bytes());
  EXPECT_EQ(r.u8(), 7);
  EXPECT_EQ(r.u16(), 65535);
  EXPECT_EQ(r.u32(), 0xdeadbeefu);
  EXPECT_EQ(r.u64(), 0x0123456789abcdefull);
  EXPECT_EQ(r.f32(), -2.5f);
  EXPECT_EQ(r.f64(), std::nextafter(1.0, 2.0));
  EXPECT_EQ(r.str(), "hello");
  EXPECT_EQ(r.remaining(), 0u);
  EXPECT_THROW(r.u8(), IoError);
}

TEST(ByteReader, OverlongStringIsIoError) {
  ByteWriter w;
  w.u32(100);
  w.raw("abc");
  ByteReader r(w.bytes());
  EXPECT_THROW(r.str(), IoError);
}

std::vector<std::uint8_t> framed(std::string_view magic, std::uint16_t version) {
  ByteWriter w;
  w.raw(magic);
  w.u16(version);
  w.u32(42);
  w.append_crc();
  return w.bytes();
}

TEST(Framing, AcceptsValidFrame) {
  const auto bytes = framed("MAGIC", 3);
  auto r = open_framed(bytes, "MAGIC", 3, "thing");
  EXPECT_EQ(r.u32(), 42u);
  EXPECT_EQ(r.remaining(), 0u);
}

TEST(Framing, RejectsEveryFlippedByte) {
  const auto bytes = framed("MAGIC", 3);
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    auto bad = bytes;
    bad[i] ^= 0x10;
    EXPECT_THROW(open_framed(bad, "MAGIC", 3, "thing"), IoError) << "byte " << i;
  }
}

TEST(Framing, RejectsWrongMagicVersionAndTruncation) {
  EXPECT_THROW(open_framed(framed("MAGIX", 3), "MAGIC", 3, "thing"), IoError);
  EXPECT_THROW(open_framed(framed("MAGIC", 4), "MAGIC", 3, "thing"), IoError);
  auto bytes = framed("MAGIC", 3);
  for (std::size_t n = 0; n < bytes.size(); ++n)
    EXPECT_THROW(open_framed(std::span(bytes).first(n), "MAGIC", 3, "thing"), IoError) << n;
}

TEST(Files, RoundTripAndMissingFile) {
  testing::TempDir dir("bio");
  const std::vector<std::uint8_t> data = {0, 1, 2, 255, 10, 13};
  write_file_bytes(dir.file("x.bin"), data);
  EXPECT_EQ(read_file_bytes(dir.file("x.bin")), data);
  EXPECT_THROW(read_file_bytes(dir.file("missing.bin")), IoError);
  EXPECT_THROW(write_file_bytes(dir.file("no/such/dir/x.bin"), data), IoError);
}

}  // namespace
}  // namespace actrm
