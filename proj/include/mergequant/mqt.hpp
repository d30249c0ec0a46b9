// Copyright 2026 The MergeQuant Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// MQT1 tensor container.
//
//   bytes 0..3   magic "MQT1"
//   bytes 4..11  header length H, little-endian uint64
//   next H bytes UTF-8 JSON: { "<name>": {"dtype", "shape", "offset", ["bits"]}, ...,
//                              ["__metadata__": {...}] }
//   remainder    raw little-endian row-major payloads; offsets are relative
//                to the first payload byte.
//
// dtypes: "f64" (real) and "i32" (integer; "bits" records the declared grid).

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "mergequant/error.hpp"
#include "mergequant/tensor.hpp"

namespace mq {

static_assert(std::endian::native == std::endian::little, "MQT1 I/O assumes a little-endian host");

class TensorArchive {
 public:
  static constexpr std::string_view kMagic = "MQT1";

  void put(const std::string& name, Tensor t) {
    check_name(name);
    ints_.erase(name);
    reals_.insert_or_assign(name, std::move(t));
  }
  void put(const std::string& name, IntTensor t) {
    check_name(name);
    reals_.erase(name);
    ints_.insert_or_assign(name, std::move(t));
  }
  void put_vector(const std::string& name, const std::vector<double>& v) {
    if (v.empty()) return;
    put(name, Tensor({v.size()}, v));
  }

  bool contains(const std::string& name) const { return reals_.count(name) || ints_.count(name); }
  bool has_real(const std::string& name) const { return reals_.count(name) > 0; }
  bool has_int(const std::string& name) const { return ints_.count(name) > 0; }

  const Tensor& real(const std::string& name) const {
    auto it = reals_.find(name);
    if (it == reals_.end()) throw DataError("container has no real tensor '" + name + "'");
    return it->second;
  }
  const IntTensor& integer(const std::string& name) const {
    auto it = ints_.find(name);
    if (it == ints_.end()) throw DataError("container has no integer tensor '" + name + "'");
    return it->second;
  }
  std::vector<double> vector(const std::string& name) const { return real(name).vec(); }

  const std::map<std::string, Tensor>& reals() const noexcept { return reals_; }
  const std::map<std::string, IntTensor>& ints() const noexcept { return ints_; }

  nlohmann::json& metadata() noexcept { return meta_; }
  const nlohmann::json& metadata() const noexcept { return meta_; }

  std::string to_bytes() const {
    // Names from both maps are laid out in one sorted order.
    std::map<std::string, int> order;
    for (const auto& [k, _] : reals_) order[k] = 0;
    for (const auto& [k, _] : ints_) order[k] = 1;

    nlohmann::json header = nlohmann::json::object();
    std::string payload;
    for (const auto& [name, kind] : order) {
      nlohmann::json entry;
      entry["offset"] = payload.size();
      if (kind == 0) {
        const Tensor& t = reals_.at(name);
        entry["dtype"] = "f64";
        entry["shape"] = t.shape();
        append_raw(payload, t.data().data(), t.size() * sizeof(double));
      } else {
        const IntTensor& t = ints_.at(name);
        entry["dtype"] = "i32";
        entry["shape"] = t.shape();
        entry["bits"] = t.bits();
        entry["extended"] = t.format().extended;
        append_raw(payload, t.data().data(), t.size() * sizeof(std::int32_t));
      }
      header[name] = std::move(entry);
    }
    if (!meta_.is_null()) header["__metadata__"] = meta_;

    const std::string h = header.dump();
    std::string out;
    out.reserve(12 + h.size() + payload.size());
    out.append(kMagic);
    const std::uint64_t len = h.size();
    append_raw(out, &len, sizeof(len));
    out += h;
    out += payload;
    return out;
  }

  static TensorArchive from_bytes(std::string_view bytes) {
    if (bytes.size() < 12 || bytes.substr(0, 4) != kMagic) throw DataError("not an MQT1 container (bad magic)");
    std::uint64_t len = 0;
    std::memcpy(&len, bytes.data() + 4, sizeof(len));
    if (len > bytes.size() - 12) throw DataError("MQT1 header length exceeds file size");
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(bytes.substr(12, len));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("MQT1 header is not valid JSON: ") + e.what());
    }
    if (!header.is_object()) throw DataError("MQT1 header must be a JSON object");
    const std::string_view payload = bytes.substr(12 + len);

    TensorArchive ar;
    for (auto it = header.begin(); it != header.end(); ++it) {
      if (it.key() == "__metadata__") {
        ar.meta_ = it.value();
        continue;
      }
      try {
        const auto& e = it.value();
        const std::string dtype = e.at("dtype");
        const Shape shape = e.at("shape").get<Shape>();
        const std::size_t offset = e.at("offset");
        const std::size_t n = shape_numel(shape);
        if (dtype == "f64") {
          std::vector<double> v(n);
          read_raw(payload, offset, v.data(), n * sizeof(double), it.key());
          ar.reals_.emplace(it.key(), Tensor(shape, std::move(v)));
        } else if (dtype == "i32") {
          std::vector<std::int32_t> v(n);
          read_raw(payload, offset, v.data(), n * sizeof(std::int32_t), it.key());
          IntFormat fmt{e.value("bits", 32), e.value("extended", false)};
          ar.ints_.emplace(it.key(), IntTensor(shape, std::move(v), fmt));
        } else {
          throw DataError("unsupported dtype '" + dtype + "' for tensor '" + it.key() + "'");
        }
      } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed MQT1 entry '" + it.key() + "': " + e.what());
      } catch (const ShapeError& e) {
        throw DataError("malformed MQT1 entry '" + it.key() + "': " + e.what());
      }
    }
    return ar;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open '" + path.string() + "' for writing");
    const std::string bytes = to_bytes();
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("failed writing '" + path.string() + "'");
  }

  static TensorArchive load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open MQT1 container '" + path.string() + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    try {
      return from_bytes(ss.str());
    } catch (const DataError& e) {
      throw DataError(path.string() + ": " + e.what());
    }
  }

 private:
  static void check_name(const std::string& name) {
    if (name.empty() || name == "__metadata__") throw ConfigError("invalid tensor name '" + name + "'");
  }
  static void append_raw(std::string& out, const void* p, std::size_t n) {
    out.append(static_cast<const char*>(p), n);
  }
  static void read_raw(std::string_view payload, std::size_t offset, void* dst, std::size_t n, const std::string& name) {
    if (offset > payload.size() || n > payload.size() - offset)
      throw DataError("payload of '" + name + "' runs past end of container");
    std::memcpy(dst, payload.data() + offset, n);
  }

  std::map<std::string, Tensor> reals_;
  std::map<std::string, IntTensor> ints_;
  nlohmann::json meta_;
};

}  // namespace mq
