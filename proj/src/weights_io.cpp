#include "lsdm/weights_io.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace lsdm {

namespace {

constexpr const char* kMagic = "lsdm-weights 1";

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void append_le_floats(std::string& out, const float* data, std::size_t n) {
  const std::size_t start = out.size();
  out.resize(start + n * 4);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data() + start, data, n * 4);
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(data[i]);
      for (int b = 0; b < 4; ++b) out[start + i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
    }
  }
}

void read_le_floats(const char* src, float* data, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(data, src, n * 4);
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b)
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(src[i * 4 + b])) << (8 * b);
      data[i] = std::bit_cast<float>(bits);
    }
  }
}

[[noreturn]] void malformed(const std::string& what) {
  throw std::runtime_error("malformed weight file: " + what);
}

}  // namespace

std::string serialize_weights(const ModelParams& params, const std::vector<std::string>& vocab) {
  const ModelConfig& c = params.config;
  c.validate();
  if (!vocab.empty() && static_cast<int>(vocab.size()) != c.vocab_size)
    throw std::invalid_argument("serialize_weights: vocabulary size does not match config");
  if (!all_finite(params)) throw std::invalid_argument("serialize_weights: non-finite weights");

  std::ostringstream h;
  h << kMagic << "\n";
  h << "n_layers " << c.n_layers << "\n";
  h << "d_model " << c.d_model << "\n";
  h << "n_heads " << c.n_heads << "\n";
  h << "d_ff " << c.d_ff << "\n";
  h << "vocab_size " << c.vocab_size << "\n";
  h << "max_seq " << c.max_seq << "\n";
  h << "norm_epsilon " << format_double(c.norm_epsilon) << "\n";
  h << "activation " << to_string(c.activation) << "\n";
  h << "vocab " << vocab.size();
  for (const auto& word : vocab) {
    if (word.empty() || word.find_first_of(" \t\n") != std::string::npos)
      throw std::invalid_argument("serialize_weights: vocabulary entries must be non-empty words");
    h << " " << word;
  }
  h << "\n";

  int count = 0;
  visit_tensors(params, [&](const std::string&, const auto&) { ++count; });
  h << "tensors " << count << "\n";
  std::size_t offset = 0;
  visit_tensors(params, [&](const std::string& name, const auto& t) {
    using TT = std::decay_t<decltype(t)>;
    h << "tensor " << name;
    if constexpr (TT::ColsAtCompileTime == 1)
      h << " 1 " << t.rows();
    else
      h << " 2 " << t.rows() << " " << t.cols();
    h << " " << offset << "\n";
    offset += static_cast<std::size_t>(t.size()) * 4;
  });
  h << "end\n";

  std::string out = h.str();
  out.reserve(out.size() + offset);
  visit_tensors(params, [&](const std::string&, const auto& t) {
    append_le_floats(out, t.data(), static_cast<std::size_t>(t.size()));
  });
  return out;
}

WeightFile deserialize_weights(const std::string& bytes) {
  std::size_t pos = 0;
  auto next_line = [&]() {
    const std::size_t nl = bytes.find('\n', pos);
    if (nl == std::string::npos) malformed("truncated header");
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };
  if (next_line() != kMagic) malformed("bad magic line");

  std::map<std::string, std::string> kv;
  std::vector<std::string> vocab;
  struct Entry {
    std::string name;
    std::vector<long> shape;
    std::size_t offset;
  };
  std::vector<Entry> dir;
  long declared = -1;
  for (;;) {
    const std::string line = next_line();
    if (line == "end") break;
    std::istringstream is(line);
    std::string key;
    is >> key;
    if (key == "vocab") {
      std::size_t n = 0;
      if (!(is >> n)) malformed("vocab line");
      vocab.resize(n);
      for (auto& w : vocab)
        if (!(is >> w)) malformed("vocab line shorter than declared");
    } else if (key == "tensors") {
      if (!(is >> declared)) malformed("tensors line");
    } else if (key == "tensor") {
      Entry e;
      int rank = 0;
      if (!(is >> e.name >> rank) || rank < 1 || rank > 2) malformed("tensor line: " + line);
      e.shape.resize(rank);
      for (auto& s : e.shape)
        if (!(is >> s)) malformed("tensor line: " + line);
      if (!(is >> e.offset)) malformed("tensor line: " + line);
      dir.push_back(std::move(e));
    } else {
      std::string value;
      if (!(is >> value)) malformed("header line: " + line);
      kv[key] = value;
    }
  }

  auto get = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) malformed(std::string("missing key ") + key);
    return it->second;
  };
  ModelConfig c;
  try {
    c.n_layers = std::stoi(get("n_layers"));
    c.d_model = std::stoi(get("d_model"));
    c.n_heads = std::stoi(get("n_heads"));
    c.d_ff = std::stoi(get("d_ff"));
    c.vocab_size = std::stoi(get("vocab_size"));
    c.max_seq = std::stoi(get("max_seq"));
    c.norm_epsilon = std::stod(get("norm_epsilon"));
    c.activation = activation_from_string(get("activation"));
  } catch (const std::logic_error& e) {
    malformed(std::string("config value: ") + e.what());
  }
  c.validate();
  if (!vocab.empty() && static_cast<int>(vocab.size()) != c.vocab_size)
    malformed("vocabulary size does not match vocab_size");

  WeightFile wf{ModelParams::zeros(c), std::move(vocab)};
  if (declared >= 0 && static_cast<std::size_t>(declared) != dir.size())
    malformed("tensor count does not match directory");
  const std::size_t data_start = pos;
  std::size_t idx = 0;
  visit_tensors(wf.params, [&](const std::string& name, auto& t) {
    using TT = std::decay_t<decltype(t)>;
    if (idx >= dir.size()) malformed("missing tensor " + name);
    const Entry& e = dir[idx++];
    if (e.name != name) malformed("expected tensor " + name + ", found " + e.name);
    const bool vec = TT::ColsAtCompileTime == 1;
    const bool shape_ok = vec ? (e.shape.size() == 1 && e.shape[0] == t.rows())
                              : (e.shape.size() == 2 && e.shape[0] == t.rows() && e.shape[1] == t.cols());
    if (!shape_ok) malformed("shape mismatch for " + name);
    const std::size_t nbytes = static_cast<std::size_t>(t.size()) * 4;
    if (data_start + e.offset + nbytes > bytes.size()) malformed("truncated data for " + name);
    read_le_floats(bytes.data() + data_start + e.offset, t.data(), static_cast<std::size_t>(t.size()));
  });
  if (idx != dir.size()) malformed("unexpected extra tensors");
  if (!all_finite(wf.params)) malformed("non-finite tensor data");
  return wf;
}

void save_weights(const std::filesystem::path& path, const ModelParams& params,
                  const std::vector<std::string>& vocab) {
  const std::string bytes = serialize_weights(params, vocab);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

WeightFile load_weights(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open weight file " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return deserialize_weights(ss.str());
}

}  // namespace lsdm
