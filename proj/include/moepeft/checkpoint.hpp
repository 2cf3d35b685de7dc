// Copyright (c) 2026 moe_peft contributors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container: a JSON manifest (tensor names, shapes, byte offsets,
// free-form meta) followed by a binary blob of little-endian float32 values
// in manifest order. Byte-deterministic: the manifest serializes with sorted
// keys and the blob layout follows the manifest.

#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "moepeft/errors.hpp"
#include "moepeft/tensor.hpp"

namespace moepeft {

struct CheckpointData {
  nlohmann::json meta;
  std::vector<std::pair<std::string, Tensor>> tensors;  // saved in this order
};

namespace detail {
constexpr char kCkptMagic[8] = {'M', 'P', 'E', 'F', 'T', 'C', 'K', '1'};
}

inline void save_checkpoint(const std::filesystem::path& path, const CheckpointData& data) {
  nlohmann::json manifest;
  manifest["format"] = "moe-peft-checkpoint";
  manifest["version"] = 1;
  manifest["meta"] = data.meta;
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : data.tensors) {
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += sizeof(float) * static_cast<std::uint64_t>(t.size());
  }
  manifest["tensors"] = tensors;
  const std::string mtext = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(detail::kCkptMagic, sizeof(detail::kCkptMagic));
  const std::uint64_t mlen = mtext.size();
  out.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
  out.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
  for (const auto& [name, t] : data.tensors) {
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(sizeof(float) * t.size()));
  }
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

inline CheckpointData load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, detail::kCkptMagic, 8) != 0) {
    throw IoError(path.string() + " is not a moe-peft checkpoint");
  }
  std::uint64_t mlen = 0;
  in.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
  std::string mtext(mlen, '\0');
  in.read(mtext.data(), static_cast<std::streamsize>(mlen));
  if (!in) throw IoError("truncated checkpoint manifest in " + path.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mtext);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad checkpoint manifest in " + path.string() + ": " + e.what());
  }
  CheckpointData data;
  data.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& entry : manifest.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    Shape shape = entry.at("shape").get<Shape>();
    std::vector<float> values(static_cast<std::size_t>(shape_numel(shape)));
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(sizeof(float) * values.size()));
    if (!in) throw IoError("truncated tensor '" + name + "' in " + path.string());
    data.tensors.emplace_back(name, Tensor::from_data(std::move(shape), std::move(values)));
  }
  return data;
}

}  // namespace moepeft
