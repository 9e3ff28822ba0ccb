// Copyright 2026 The MIM4D Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "mim4d/blob.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

namespace mim4d::io {

static_assert(std::endian::native == std::endian::little, "blob IO assumes a little-endian host");

std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::kF64:
    case DType::kI64:
      return 8;
    case DType::kF32:
    case DType::kI32:
      return 4;
    case DType::kU8:
      return 1;
  }
  throw BlobError("unknown dtype code");
}

namespace {

template <class T>
void append(std::vector<std::uint8_t>& out, const T& v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <class T>
T take(const std::vector<std::uint8_t>& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw BlobError("truncated blob");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

std::vector<std::uint64_t> to_extents(const Shape& s) { return {s.begin(), s.end()}; }

std::uint64_t count_of(const std::vector<std::uint64_t>& e) {
  std::uint64_t n = 1;
  for (auto x : e) n *= x;
  return n;
}

}  // namespace

void Blob::insert(NamedArray a) {
  if (has(a.name)) throw BlobError("duplicate array name: " + a.name);
  arrays_.push_back(std::move(a));
}

void Blob::put(const std::string& name, const Tensor& t) {
  NamedArray a{name, DType::kF64, to_extents(t.shape()), {}};
  a.bytes.resize(t.storage().size() * sizeof(double));
  std::memcpy(a.bytes.data(), t.storage().data(), a.bytes.size());
  insert(std::move(a));
}

void Blob::put_i64(const std::string& name, const std::vector<std::int64_t>& values, Shape shape) {
  if (shape.empty()) shape = {static_cast<std::int64_t>(values.size())};
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) throw BlobError("i64 shape mismatch: " + name);
  NamedArray a{name, DType::kI64, to_extents(shape), {}};
  a.bytes.resize(values.size() * sizeof(std::int64_t));
  std::memcpy(a.bytes.data(), values.data(), a.bytes.size());
  insert(std::move(a));
}

void Blob::put_u8(const std::string& name, const std::vector<std::uint8_t>& values, Shape shape) {
  if (shape.empty()) shape = {static_cast<std::int64_t>(values.size())};
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) throw BlobError("u8 shape mismatch: " + name);
  insert(NamedArray{name, DType::kU8, to_extents(shape), values});
}

void Blob::put_string(const std::string& name, const std::string& text) {
  put_u8(name, std::vector<std::uint8_t>(text.begin(), text.end()));
}

bool Blob::has(const std::string& name) const {
  return std::any_of(arrays_.begin(), arrays_.end(), [&](const NamedArray& a) { return a.name == name; });
}

const NamedArray& Blob::at(const std::string& name) const {
  for (const auto& a : arrays_)
    if (a.name == name) return a;
  throw BlobError("missing array: " + name);
}

Tensor Blob::tensor(const std::string& name) const {
  const auto& a = at(name);
  if (a.dtype != DType::kF64) throw BlobError("array is not f64: " + name);
  Shape shape(a.extents.begin(), a.extents.end());
  std::vector<double> data(a.bytes.size() / sizeof(double));
  std::memcpy(data.data(), a.bytes.data(), a.bytes.size());
  return Tensor(std::move(shape), std::move(data));
}

std::vector<std::int64_t> Blob::i64(const std::string& name) const {
  const auto& a = at(name);
  if (a.dtype != DType::kI64) throw BlobError("array is not i64: " + name);
  std::vector<std::int64_t> v(a.bytes.size() / sizeof(std::int64_t));
  std::memcpy(v.data(), a.bytes.data(), a.bytes.size());
  return v;
}

std::vector<std::uint8_t> Blob::u8(const std::string& name) const {
  const auto& a = at(name);
  if (a.dtype != DType::kU8) throw BlobError("array is not u8: " + name);
  return a.bytes;
}

std::string Blob::string(const std::string& name) const {
  const auto bytes = u8(name);
  return std::string(bytes.begin(), bytes.end());
}

std::vector<std::uint8_t> Blob::serialize() const {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  append(out, version);
  for (const auto& a : arrays_) {
    append(out, static_cast<std::uint32_t>(a.name.size()));
    out.insert(out.end(), a.name.begin(), a.name.end());
    append(out, static_cast<std::uint8_t>(a.dtype));
    append(out, static_cast<std::uint32_t>(a.extents.size()));
    for (auto e : a.extents) append(out, e);
    out.insert(out.end(), a.bytes.begin(), a.bytes.end());
  }
  return out;
}

Blob Blob::deserialize(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw BlobError("bad magic, not an MV4D blob");
  std::size_t pos = 4;
  Blob blob;
  blob.version = take<std::uint32_t>(bytes, pos);
  if (blob.version != kBlobVersion) throw BlobError("unsupported MV4D version " + std::to_string(blob.version));
  while (pos < bytes.size()) {
    NamedArray a;
    const auto name_len = take<std::uint32_t>(bytes, pos);
    if (pos + name_len > bytes.size()) throw BlobError("truncated array name");
    a.name.assign(reinterpret_cast<const char*>(bytes.data() + pos), name_len);
    pos += name_len;
    const auto code = take<std::uint8_t>(bytes, pos);
    if (code > static_cast<std::uint8_t>(DType::kI32)) throw BlobError("unknown dtype code in " + a.name);
    a.dtype = static_cast<DType>(code);
    const auto rank = take<std::uint32_t>(bytes, pos);
    for (std::uint32_t i = 0; i < rank; ++i) a.extents.push_back(take<std::uint64_t>(bytes, pos));
    const std::uint64_t nbytes = count_of(a.extents) * dtype_size(a.dtype);
    if (pos + nbytes > bytes.size()) throw BlobError("truncated data for " + a.name);
    a.bytes.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + nbytes));
    pos += nbytes;
    blob.insert(std::move(a));
  }
  return blob;
}

void Blob::write(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw BlobError("cannot open " + tmp.string() + " for writing");
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw BlobError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Blob Blob::read(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw BlobError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace mim4d::io
