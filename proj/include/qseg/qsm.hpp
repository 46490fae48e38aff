#pragma once

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "qseg/errors.hpp"
#include "qseg/model.hpp"
#include "qseg/quant.hpp"
#include "qseg/tensor.hpp"

namespace qseg {

// QSM model container: magic "QSEG", u32 format version, u64 header length,
// compact JSON header (layer specs, tensor table, quantization records), then
// raw little-endian tensor payloads at header-declared offsets. Scales are
// decimal strings (shortest round-trip), multipliers/shifts plain integers.

inline constexpr std::uint32_t kQsmVersion = 1;
static_assert(std::endian::native == std::endian::little,
              "QSM payloads are little-endian; big-endian hosts need byte swaps");

enum class QsmKind { kFloat, kQuantized };

namespace detail {

inline std::string float_str(float v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline float float_parse(const std::string& s) {
  float v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{}) throw io_error("QSM: bad float literal '" + s + "'");
  return v;
}

struct PayloadWriter {
  std::vector<char> bytes;
  nlohmann::json table = nlohmann::json::array();

  template <typename T>
  void add(const std::string& name, const char* dtype, std::vector<int> dims, const T* data,
           std::size_t count) {
    nlohmann::json entry = nlohmann::json::array();
    entry.push_back(name);
    entry.push_back(dtype);
    entry.push_back(dims);
    entry.push_back(bytes.size());
    entry.push_back(count * sizeof(T));
    table.push_back(std::move(entry));
    const std::size_t off = bytes.size();
    bytes.resize(off + count * sizeof(T));
    std::memcpy(bytes.data() + off, data, count * sizeof(T));
  }
};

struct PayloadReader {
  const std::vector<char>& bytes;
  std::map<std::string, nlohmann::json> entries;

  PayloadReader(const std::vector<char>& b, const nlohmann::json& table) : bytes(b) {
    for (const auto& e : table) entries[e[0].get<std::string>()] = e;
  }

  template <typename T>
  void read(const std::string& name, const char* dtype, T* dst, std::size_t count) const {
    auto it = entries.find(name);
    if (it == entries.end()) throw io_error("QSM: missing tensor " + name);
    const auto& e = it->second;
    if (e[1].get<std::string>() != dtype) throw io_error("QSM: dtype mismatch for " + name);
    const std::size_t off = e[3].get<std::size_t>();
    const std::size_t nbytes = e[4].get<std::size_t>();
    if (nbytes != count * sizeof(T)) throw io_error("QSM: size mismatch for " + name);
    if (off + nbytes > bytes.size()) throw io_error("QSM: truncated payload at " + name);
    std::memcpy(dst, bytes.data() + off, nbytes);
  }
};

inline nlohmann::json specs_to_json(const std::vector<LayerSpec>& specs) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : specs) {
    nlohmann::json e = nlohmann::json::array();
    e.push_back(s.index);
    e.push_back(to_string(s.location));
    e.push_back(to_string(s.kind));
    e.push_back(s.c_in);
    e.push_back(s.c_out);
    arr.push_back(std::move(e));
  }
  return arr;
}

inline std::vector<LayerSpec> specs_from_json(const nlohmann::json& arr) {
  std::vector<LayerSpec> specs;
  for (const auto& e : arr) {
    LayerSpec s;
    s.index = e[0].get<int>();
    const std::string loc = e[1].get<std::string>();
    const std::string kind = e[2].get<std::string>();
    s.c_in = e[3].get<int>();
    s.c_out = e[4].get<int>();
    if (loc == "encoder") s.location = LayerLocation::kEncoder;
    else if (loc == "intermediate") s.location = LayerLocation::kIntermediate;
    else if (loc == "decoder") s.location = LayerLocation::kDecoder;
    else if (loc == "head") s.location = LayerLocation::kHead;
    else throw io_error("QSM: unknown layer location " + loc);
    if (kind == "convblock_pool") s.kind = LayerKind::kConvBlockPool;
    else if (kind == "convblock") s.kind = LayerKind::kConvBlock;
    else if (kind == "unpool_convblock") s.kind = LayerKind::kUnpoolConvBlock;
    else if (kind == "conv_head") s.kind = LayerKind::kConvHead;
    else throw io_error("QSM: unknown layer kind " + kind);
    specs.push_back(s);
  }
  validate_specs(specs);
  return specs;
}

inline void write_file(const std::string& path, const nlohmann::json& header,
                       const std::vector<char>& payload) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw io_error("cannot open " + path + " for writing");
  const std::string hdr = header.dump();
  const std::uint32_t version = kQsmVersion;
  const std::uint64_t hlen = hdr.size();
  f.write("QSEG", 4);
  f.write(reinterpret_cast<const char*>(&version), 4);
  f.write(reinterpret_cast<const char*>(&hlen), 8);
  f.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
  f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!f) throw io_error("failed writing " + path);
}

struct RawFile {
  nlohmann::json header;
  std::vector<char> payload;
};

inline RawFile read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open " + path);
  char magic[4] = {};
  std::uint32_t version = 0;
  std::uint64_t hlen = 0;
  f.read(magic, 4);
  f.read(reinterpret_cast<char*>(&version), 4);
  f.read(reinterpret_cast<char*>(&hlen), 8);
  if (!f || std::memcmp(magic, "QSEG", 4) != 0)
    throw io_error("not a QSM file (bad magic): " + path);
  if (version != kQsmVersion)
    throw io_error("unsupported QSM version " + std::to_string(version) + " in " + path);
  std::string hdr(hlen, '\0');
  f.read(hdr.data(), static_cast<std::streamsize>(hlen));
  if (!f) throw io_error("truncated QSM header in " + path);
  RawFile raw;
  raw.header = nlohmann::json::parse(hdr, nullptr, /*allow_exceptions=*/false);
  if (raw.header.is_discarded()) throw io_error("corrupt QSM header in " + path);
  raw.payload.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
  std::size_t declared = 0;
  for (const auto& e : raw.header.at("tensors"))
    declared = std::max(declared, e[3].get<std::size_t>() + e[4].get<std::size_t>());
  if (raw.payload.size() < declared) throw io_error("truncated QSM payload in " + path);
  return raw;
}

}  // namespace detail

inline QsmKind qsm_peek_kind(const std::string& path) {
  auto raw = detail::read_file(path);
  const std::string kind = raw.header.at("kind").get<std::string>();
  if (kind == "float32") return QsmKind::kFloat;
  if (kind == "int8") return QsmKind::kQuantized;
  throw io_error("unknown QSM kind " + kind + " in " + path);
}

// ---------------------------------------------------------------------------
// Float models.

inline void save_model(const ModelGraph<float>& m, const std::string& path) {
  for (const auto& b : m.blocks) {
    check_finite(b.conv3x3.weight, "conv3x3.weight");
    check_finite(b.conv3x3.bias, "conv3x3.bias");
    check_finite(b.conv1x1.weight, "conv1x1.weight");
    check_finite(b.dw3x3.weight, "dw3x3.weight");
  }
  check_finite(m.head.weight, "head.weight");

  detail::PayloadWriter pw;
  auto add_conv = [&](const std::string& name, const ConvParams<float>& c) {
    pw.add(name + ".w", "f32", {c.weight.n(), c.weight.c(), c.weight.h(), c.weight.w()},
           c.weight.data(), c.weight.numel());
    pw.add(name + ".b", "f32", {static_cast<int>(c.bias.size())}, c.bias.data(), c.bias.size());
  };
  auto add_bn = [&](const std::string& name, const BatchNormParams<float>& bn) {
    const int c = bn.channels();
    pw.add(name + ".gamma", "f32", {c}, bn.gamma.data(), bn.gamma.size());
    pw.add(name + ".beta", "f32", {c}, bn.beta.data(), bn.beta.size());
    pw.add(name + ".mean", "f32", {c}, bn.running_mean.data(), bn.running_mean.size());
    pw.add(name + ".var", "f32", {c}, bn.running_var.data(), bn.running_var.size());
  };
  for (int b = 0; b < 7; ++b) {
    const std::string p = "b" + std::to_string(b + 1);
    add_conv(p + ".conv3x3", m.blocks[b].conv3x3);
    if (!m.folded) add_bn(p + ".bn1", m.blocks[b].bn1);
    add_conv(p + ".conv1x1", m.blocks[b].conv1x1);
    add_conv(p + ".dw3x3", m.blocks[b].dw3x3);
    if (!m.folded) add_bn(p + ".bn2", m.blocks[b].bn2);
  }
  add_conv("head", m.head);

  nlohmann::json header;
  header["format"] = "qsm";
  header["kind"] = "float32";
  header["in_channels"] = m.in_channels;
  header["folded"] = m.folded;
  header["layers"] = detail::specs_to_json(m.specs);
  header["tensors"] = std::move(pw.table);
  if (!m.folded) {
    header["bn_eps"] = detail::float_str(m.blocks[0].bn1.eps);
    header["bn_momentum"] = detail::float_str(m.blocks[0].bn1.momentum);
  }
  detail::write_file(path, header, pw.bytes);
}

inline ModelGraph<float> load_float_model(const std::string& path) {
  auto raw = detail::read_file(path);
  if (raw.header.at("kind").get<std::string>() != "float32")
    throw io_error("expected a float32 QSM file: " + path);
  ModelGraph<float> m;
  m.specs = detail::specs_from_json(raw.header.at("layers"));
  m.in_channels = raw.header.at("in_channels").get<int>();
  m.folded = raw.header.at("folded").get<bool>();
  float eps = 1e-5f, momentum = 0.1f;
  if (!m.folded) {
    eps = detail::float_parse(raw.header.at("bn_eps").get<std::string>());
    momentum = detail::float_parse(raw.header.at("bn_momentum").get<std::string>());
  }
  detail::PayloadReader pr(raw.payload, raw.header.at("tensors"));

  auto read_conv = [&](const std::string& name, int c_out, int c_in, int k, int pad,
                       int groups) {
    ConvParams<float> c;
    c.weight = Tensor<float>(c_out, c_in / groups, k, k);
    c.bias.assign(c_out, 0.f);
    c.padding = pad;
    c.groups = groups;
    pr.read(name + ".w", "f32", c.weight.data(), c.weight.numel());
    pr.read(name + ".b", "f32", c.bias.data(), c.bias.size());
    return c;
  };
  auto read_bn = [&](const std::string& name, int c) {
    BatchNormParams<float> bn;
    bn.gamma.assign(c, 0.f);
    bn.beta.assign(c, 0.f);
    bn.running_mean.assign(c, 0.f);
    bn.running_var.assign(c, 0.f);
    bn.eps = eps;
    bn.momentum = momentum;
    pr.read(name + ".gamma", "f32", bn.gamma.data(), bn.gamma.size());
    pr.read(name + ".beta", "f32", bn.beta.data(), bn.beta.size());
    pr.read(name + ".mean", "f32", bn.running_mean.data(), bn.running_mean.size());
    pr.read(name + ".var", "f32", bn.running_var.data(), bn.running_var.size());
    return bn;
  };
  for (int b = 0; b < 7; ++b) {
    const std::string p = "b" + std::to_string(b + 1);
    const auto& s = m.specs[b];
    ConvBlockParams<float> blk;
    blk.conv3x3 = read_conv(p + ".conv3x3", s.c_out, s.c_in, 3, 1, 1);
    if (!m.folded) blk.bn1 = read_bn(p + ".bn1", s.c_out);
    blk.conv1x1 = read_conv(p + ".conv1x1", s.c_out, s.c_out, 1, 0, 1);
    blk.dw3x3 = read_conv(p + ".dw3x3", s.c_out, s.c_out, 3, 1, s.c_out);
    if (!m.folded) blk.bn2 = read_bn(p + ".bn2", s.c_out);
    m.blocks.push_back(std::move(blk));
  }
  m.head = read_conv("head", 1, m.specs[7].c_in, 3, 1, 1);

  for (const auto& b : m.blocks) {
    check_finite(b.conv3x3.weight, path + ": conv3x3.weight");
    check_finite(b.conv3x3.bias, path + ": conv3x3.bias");
    check_finite(b.conv1x1.weight, path + ": conv1x1.weight");
    check_finite(b.dw3x3.weight, path + ": dw3x3.weight");
    if (!m.folded) {
      check_finite(b.bn1.gamma, path + ": bn1.gamma");
      check_finite(b.bn2.running_var, path + ": bn2.var");
    }
  }
  check_finite(m.head.weight, path + ": head.weight");
  return m;
}

// ---------------------------------------------------------------------------
// Quantized models.

inline void save_model(const QuantizedModel& m, const std::string& path) {
  detail::PayloadWriter pw;
  nlohmann::json convs = nlohmann::json::array();
  auto add_qconv = [&](const std::string& name, const QConv& c) {
    pw.add(name + ".w", "i8", {c.weight.n(), c.weight.c(), c.weight.h(), c.weight.w()},
           c.weight.data(), c.weight.numel());
    pw.add(name + ".b", "i32", {static_cast<int>(c.bias.size())}, c.bias.data(),
           c.bias.size());
    nlohmann::json e;
    e["n"] = name;
    e["i"] = c.in_site;
    e["o"] = c.out_site;
    e["r"] = c.relu_after;
    e["p"] = c.padding;
    e["g"] = c.groups;
    nlohmann::json ws = nlohmann::json::array();
    nlohmann::json ms = nlohmann::json::array();
    nlohmann::json ss = nlohmann::json::array();
    for (int oc = 0; oc < c.c_out(); ++oc) {
      ws.push_back(detail::float_str(c.weight_scales[oc]));
      ms.push_back(c.requant[oc].multiplier);
      ss.push_back(c.requant[oc].shift);
    }
    e["ws"] = std::move(ws);
    e["m"] = std::move(ms);
    e["s"] = std::move(ss);
    convs.push_back(std::move(e));
  };
  nlohmann::json adds = nlohmann::json::array();
  auto add_qadd = [&](const std::string& name, const QAdd& a) {
    nlohmann::json e;
    e["n"] = name;
    e["a"] = a.a_site;
    e["b"] = a.b_site;
    e["o"] = a.out_site;
    e["am"] = a.a_rescale.multiplier;
    e["as"] = a.a_rescale.shift;
    e["bm"] = a.b_rescale.multiplier;
    e["bs"] = a.b_rescale.shift;
    adds.push_back(std::move(e));
  };
  for (int b = 0; b < 7; ++b) {
    const std::string p = "b" + std::to_string(b + 1);
    add_qconv(p + ".conv3x3", m.blocks[b].conv3x3);
    add_qconv(p + ".conv1x1", m.blocks[b].conv1x1);
    add_qconv(p + ".dw3x3", m.blocks[b].dw3x3);
    add_qadd(p + ".inner", m.blocks[b].inner);
  }
  add_qconv("head", m.head);
  add_qadd("m", m.m_add);
  add_qadd("d5.in", m.skip5);
  add_qadd("d6.in", m.skip6);
  add_qadd("d7.in", m.skip7);
  add_qadd("b7.res", m.res7);

  nlohmann::json sites = nlohmann::json::array();
  for (const auto& s : m.sites) {
    nlohmann::json e = nlohmann::json::array();
    e.push_back(s.name);
    e.push_back(detail::float_str(s.scale));
    e.push_back(s.zero_point);
    sites.push_back(std::move(e));
  }

  nlohmann::json header;
  header["format"] = "qsm";
  header["kind"] = "int8";
  header["in_channels"] = m.in_channels;
  header["layers"] = detail::specs_to_json(m.specs);
  header["sites"] = std::move(sites);
  header["convs"] = std::move(convs);
  header["adds"] = std::move(adds);
  header["tensors"] = std::move(pw.table);
  detail::write_file(path, header, pw.bytes);
}

inline QuantizedModel load_quantized_model(const std::string& path) {
  auto raw = detail::read_file(path);
  if (raw.header.at("kind").get<std::string>() != "int8")
    throw io_error("expected an int8 QSM file: " + path);
  QuantizedModel m;
  m.specs = detail::specs_from_json(raw.header.at("layers"));
  m.in_channels = raw.header.at("in_channels").get<int>();
  for (const auto& e : raw.header.at("sites")) {
    ActSite s;
    s.name = e[0].get<std::string>();
    s.scale = detail::float_parse(e[1].get<std::string>());
    s.zero_point = e[2].get<int>();
    m.sites.push_back(std::move(s));
  }
  if (m.sites.size() != static_cast<std::size_t>(kNumSites))
    throw io_error("QSM: expected " + std::to_string(kNumSites) + " sites in " + path);

  detail::PayloadReader pr(raw.payload, raw.header.at("tensors"));
  std::map<std::string, nlohmann::json> conv_info;
  for (const auto& e : raw.header.at("convs")) conv_info[e.at("n").get<std::string>()] = e;
  std::map<std::string, nlohmann::json> add_info;
  for (const auto& e : raw.header.at("adds")) add_info[e.at("n").get<std::string>()] = e;

  auto read_qconv = [&](const std::string& name, int c_out, int c_in, int k, int groups) {
    auto it = conv_info.find(name);
    if (it == conv_info.end()) throw io_error("QSM: missing conv record " + name);
    const auto& e = it->second;
    QConv c;
    c.weight = Tensor<std::int8_t>(c_out, c_in / groups, k, k);
    c.bias.assign(c_out, 0);
    pr.read(name + ".w", "i8", c.weight.data(), c.weight.numel());
    pr.read(name + ".b", "i32", c.bias.data(), c.bias.size());
    c.in_site = e.at("i").get<int>();
    c.out_site = e.at("o").get<int>();
    c.relu_after = e.at("r").get<bool>();
    c.padding = e.at("p").get<int>();
    c.groups = e.at("g").get<int>();
    for (const auto& s : e.at("ws"))
      c.weight_scales.push_back(detail::float_parse(s.get<std::string>()));
    const auto& ms = e.at("m");
    const auto& ss = e.at("s");
    for (std::size_t i = 0; i < ms.size(); ++i)
      c.requant.push_back({ms[i].get<std::int32_t>(), ss[i].get<int>()});
    if (c.weight_scales.size() != static_cast<std::size_t>(c_out) ||
        c.requant.size() != static_cast<std::size_t>(c_out))
      throw io_error("QSM: per-channel record count mismatch for " + name);
    return c;
  };
  auto read_qadd = [&](const std::string& name) {
    auto it = add_info.find(name);
    if (it == add_info.end()) throw io_error("QSM: missing add record " + name);
    const auto& e = it->second;
    QAdd a;
    a.a_site = e.at("a").get<int>();
    a.b_site = e.at("b").get<int>();
    a.out_site = e.at("o").get<int>();
    a.a_rescale = {e.at("am").get<std::int32_t>(), e.at("as").get<int>()};
    a.b_rescale = {e.at("bm").get<std::int32_t>(), e.at("bs").get<int>()};
    return a;
  };
  for (int b = 0; b < 7; ++b) {
    const std::string p = "b" + std::to_string(b + 1);
    const auto& s = m.specs[b];
    m.blocks[b].conv3x3 = read_qconv(p + ".conv3x3", s.c_out, s.c_in, 3, 1);
    m.blocks[b].conv1x1 = read_qconv(p + ".conv1x1", s.c_out, s.c_out, 1, 1);
    m.blocks[b].dw3x3 = read_qconv(p + ".dw3x3", s.c_out, s.c_out, 3, s.c_out);
    m.blocks[b].inner = read_qadd(p + ".inner");
  }
  m.head = read_qconv("head", 1, m.specs[7].c_in, 3, 1);
  m.m_add = read_qadd("m");
  m.skip5 = read_qadd("d5.in");
  m.skip6 = read_qadd("d6.in");
  m.skip7 = read_qadd("d7.in");
  m.res7 = read_qadd("b7.res");
  return m;
}

// ---------------------------------------------------------------------------
// Size accounting for the summary command.

inline std::size_t float_payload_bytes(const std::vector<LayerSpec>& specs) {
  std::size_t n = 0;
  for (int b = 0; b < 7; ++b) {
    const std::size_t c = specs[b].c_out;
    n += 9 * specs[b].c_in * c + c;  // conv3x3
    n += 4 * c;                      // bn1 (gamma/beta/mean/var)
    n += c * c + c;                  // conv1x1
    n += 9 * c + c;                  // dw3x3
    n += 4 * c;                      // bn2
  }
  n += 9 * static_cast<std::size_t>(specs[7].c_in) + 1;
  return n * 4;
}

inline std::size_t estimate_float_file_size(const std::vector<LayerSpec>& specs) {
  return 16 + 4600 + float_payload_bytes(specs);  // header measures ~4.5 KB
}

// Weights + int32 biases + measured per-record header costs.
inline std::size_t estimate_int8_file_size(const std::vector<LayerSpec>& specs) {
  std::size_t weights = 0, channels = 0;
  for (int b = 0; b < 7; ++b) {
    const std::size_t c = specs[b].c_out;
    weights += 9 * specs[b].c_in * c + c * c + 9 * c;
    channels += 3 * c;
  }
  weights += 9 * static_cast<std::size_t>(specs[7].c_in);
  channels += 1;
  const std::size_t payload = weights + 4 * channels;
  // per channel: scale string (~13 B), multiplier (~12 B), shift (~3 B)
  const std::size_t header = 1200 + 28 * channels + 40 * kNumSites + 90 * 12 + 75 * 22;
  return 16 + header + payload;
}

}  // namespace qseg
