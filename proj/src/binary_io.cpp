#include "evtraffic/binary_io.hpp"

#include "evtraffic/errors.hpp"

namespace evtraffic::io {

void BinaryWriter::bytes(const void* data, std::size_t n) {
  out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

void BinaryWriter::str(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  bytes(s.data(), s.size());
}

void BinaryWriter::f32_block(const std::vector<double>& values) {
  std::vector<float> tmp(values.begin(), values.end());
  bytes(tmp.data(), tmp.size() * sizeof(float));
}

void BinaryReader::bytes(void* data, std::size_t n) {
  in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in_.gcount()) != n) throw ValidationError(source_ + ": unexpected end of file");
}

std::uint8_t BinaryReader::u8() {
  std::uint8_t v;
  bytes(&v, 1);
  return v;
}
std::uint32_t BinaryReader::u32() {
  std::uint32_t v;
  bytes(&v, 4);
  return v;
}
std::uint64_t BinaryReader::u64() {
  std::uint64_t v;
  bytes(&v, 8);
  return v;
}
float BinaryReader::f32() {
  float v;
  bytes(&v, 4);
  return v;
}
double BinaryReader::f64() {
  double v;
  bytes(&v, 8);
  return v;
}

std::string BinaryReader::str() {
  const std::uint32_t n = u32();
  if (n > (1u << 20)) throw ValidationError(source_ + ": implausible string length");
  std::string s(n, '\0');
  bytes(s.data(), n);
  return s;
}

std::vector<double> BinaryReader::f32_block(std::size_t n) {
  std::vector<float> tmp(n);
  bytes(tmp.data(), n * sizeof(float));
  return {tmp.begin(), tmp.end()};
}

void Fnv1a::update(const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    state_ ^= p[i];
    state_ *= 0x100000001b3ULL;
  }
}

}  // namespace evtraffic::io
