// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "specopd/model.hpp"

namespace specopd {

// Checkpoint container, little endian:
//   8-byte magic "SPKOPD01"
//   u32 config length, config as UTF-8 JSON
//   u64 config fingerprint
//   u32 tensor count, then per tensor:
//     u16 path length, path bytes
//     u8 dtype (0 = f32, 1 = f64), u8 rank, u64 extents[rank]
//     raw payload
inline constexpr char kCheckpointMagic[8] = {'S', 'P', 'K', 'O', 'P', 'D', '0', '1'};

namespace detail {

template <typename V>
void write_pod(std::ostream& os, V v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::istream& is, const char* what) {
    V v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(V));
    require(static_cast<bool>(is), std::string("checkpoint: truncated file reading ") + what);
    return v;
}

template <ScalarType T>
constexpr uint8_t dtype_tag() {
    return std::is_same_v<T, float> ? 0 : 1;
}

} // namespace detail

template <ScalarType T>
void save_checkpoint(const Model<T>& model, const std::string& path) {
    model.params.validate_against(model.cfg);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(os), "save_checkpoint: cannot open " + path);
    os.write(kCheckpointMagic, 8);
    const std::string cfg_json = model.cfg.to_json().dump();
    detail::write_pod<uint32_t>(os, static_cast<uint32_t>(cfg_json.size()));
    os.write(cfg_json.data(), static_cast<std::streamsize>(cfg_json.size()));
    detail::write_pod<uint64_t>(os, model.cfg.fingerprint());
    detail::write_pod<uint32_t>(os, static_cast<uint32_t>(model.params.tensors.size()));
    for (const auto& [tpath, tensor] : model.params.tensors) {
        detail::write_pod<uint16_t>(os, static_cast<uint16_t>(tpath.size()));
        os.write(tpath.data(), static_cast<std::streamsize>(tpath.size()));
        detail::write_pod<uint8_t>(os, detail::dtype_tag<T>());
        detail::write_pod<uint8_t>(os, static_cast<uint8_t>(tensor->shape.size()));
        for (int e : tensor->shape) {
            detail::write_pod<uint64_t>(os, static_cast<uint64_t>(e));
        }
        os.write(reinterpret_cast<const char*>(tensor->data.data()),
                 static_cast<std::streamsize>(tensor->data.size() * sizeof(T)));
    }
    require(static_cast<bool>(os), "save_checkpoint: write failed for " + path);
}

/// Loads a checkpoint. When `expected` is given, the stored config must match
/// it field by field; the error names the first differing field.
template <ScalarType T>
Model<T> load_checkpoint(const std::string& path,
                         const std::optional<ModelConfig>& expected = std::nullopt) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), "load_checkpoint: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    require(static_cast<bool>(is) && std::memcmp(magic, kCheckpointMagic, 8) == 0,
            "load_checkpoint: bad magic in " + path);

    const auto cfg_len = detail::read_pod<uint32_t>(is, "config length");
    std::string cfg_json(cfg_len, '\0');
    is.read(cfg_json.data(), cfg_len);
    require(static_cast<bool>(is), "checkpoint: truncated file reading config");
    Model<T> model;
    model.cfg = ModelConfig::from_json(nlohmann::json::parse(cfg_json));

    const auto fp = detail::read_pod<uint64_t>(is, "config fingerprint");
    require(fp == model.cfg.fingerprint(), "load_checkpoint: config fingerprint mismatch");
    if (expected.has_value()) {
        const std::string field = expected->first_mismatch(model.cfg);
        require(field.empty(), "load_checkpoint: config mismatch on field '" + field + "'");
    }

    const auto count = detail::read_pod<uint32_t>(is, "tensor count");
    for (uint32_t i = 0; i < count; ++i) {
        const auto plen = detail::read_pod<uint16_t>(is, "path length");
        std::string tpath(plen, '\0');
        is.read(tpath.data(), plen);
        require(static_cast<bool>(is), "checkpoint: truncated file reading path");
        const auto dtype = detail::read_pod<uint8_t>(is, "dtype");
        require(dtype == detail::dtype_tag<T>(),
                "load_checkpoint: dtype mismatch for " + tpath + " (file dtype tag " +
                    std::to_string(dtype) + ")");
        const auto rank = detail::read_pod<uint8_t>(is, "rank");
        std::vector<int> shape(rank);
        for (auto& e : shape) {
            e = static_cast<int>(detail::read_pod<uint64_t>(is, "extent"));
        }
        Tensor<T> t(shape);
        is.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(T)));
        require(static_cast<bool>(is), "checkpoint: truncated file reading payload of " + tpath);
        t.requires_grad = true;
        model.params.tensors[tpath] = std::make_shared<Tensor<T>>(std::move(t));
    }
    model.params.validate_against(model.cfg);
    return model;
}

} // namespace specopd
