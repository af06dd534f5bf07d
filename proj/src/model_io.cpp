#include <bit>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>
#include <thread>

#include "mhelab/model.hpp"

namespace mhelab {

Arch parse_arch(const std::string& name) {
  if (name == "encoder_only" || name == "encoder") return Arch::encoder_only;
  if (name == "decoder_only" || name == "decoder") return Arch::decoder_only;
  throw ContractError("unknown arch '" + name + "' (valid: encoder_only, decoder_only)");
}

const char* arch_name(Arch a) {
  return a == Arch::encoder_only ? "encoder_only" : "decoder_only";
}

LrSchedule parse_schedule(const std::string& name) {
  if (name == "linear") return LrSchedule::linear;
  if (name == "constant") return LrSchedule::constant;
  throw ContractError("unknown schedule '" + name + "' (valid: linear, constant)");
}

Objective parse_objective(const std::string& name) {
  if (name == "mlm") return Objective::mlm;
  if (name == "clm") return Objective::clm;
  throw ContractError("unknown objective '" + name + "' (valid: mlm, clm)");
}

std::vector<std::int32_t> bytes_to_tokens(const std::string& data) {
  std::vector<std::int32_t> out;
  out.reserve(data.size());
  for (unsigned char c : data) out.push_back(static_cast<std::int32_t>(c));
  return out;
}

std::vector<std::int32_t> load_byte_tokens(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return bytes_to_tokens(ss.str());
}

unsigned resolve_thread_cap(unsigned requested) {
  unsigned cap = 0;
  if (const char* env = std::getenv("MHELAB_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) cap = static_cast<unsigned>(v);
  }
  unsigned n = requested;
  if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
  if (cap > 0) n = std::min(n, cap);
  return std::max(1u, n);
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'M', 'H', 'E', 'L', 'A', 'B', '0', '1'};

void append_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t read_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void append_f32_le(std::string& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

float read_f32_le(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string shape_text(const std::vector<std::size_t>& shape) {
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += 'x';
    s += std::to_string(shape[i]);
  }
  return s;
}

struct ManifestEntry {
  std::string name;
  std::vector<std::size_t> shape;
  std::uint64_t offset = 0;
};

void save_impl(const ModelConfig& cfg,
               const std::vector<std::pair<std::string, std::vector<float>>>& tensors,
               const std::vector<std::vector<std::size_t>>& shapes, const std::string& path) {
  std::ostringstream header;
  header << "arch=" << arch_name(cfg.arch) << '\n'
         << "variant=" << variant_name(cfg.variant) << '\n'
         << "n_layers=" << cfg.n_layers << '\n'
         << "n_heads=" << cfg.n_heads << '\n'
         << "head_dim=" << cfg.head_dim << '\n'
         << "model_dim=" << cfg.model_dim << '\n'
         << "ffn_dim=" << cfg.ffn_dim << '\n'
         << "vocab_size=" << cfg.vocab_size << '\n'
         << "max_seq_len=" << cfg.max_seq_len << '\n'
         << "dropout=" << format_double(cfg.dropout) << '\n'
         << "seed=" << cfg.seed << '\n'
         << "tensors=" << tensors.size() << '\n';
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    header << "tensor=" << tensors[i].first << ';' << shape_text(shapes[i]) << ';' << offset
           << '\n';
    offset += tensors[i].second.size() * 4;
  }

  std::string out;
  out.append(kMagic, sizeof(kMagic));
  const std::string h = header.str();
  append_u64_le(out, h.size());
  out += h;
  for (const auto& [name, values] : tensors)
    for (float f : values) append_f32_le(out, f);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("failed writing " + path);
}

template <typename T>
void save_model(const Model<T>& model, const std::string& path) {
  std::vector<std::pair<std::string, std::vector<float>>> tensors;
  std::vector<std::vector<std::size_t>> shapes;
  for (const auto& [name, t] : model.parameters()) {
    std::vector<float> values(t.numel());
    for (std::size_t i = 0; i < t.numel(); ++i) values[i] = static_cast<float>(t.at(i));
    tensors.emplace_back(name, std::move(values));
    shapes.push_back(t.shape());
  }
  save_impl(model.config(), tensors, shapes, path);
}

}  // namespace

void save_checkpoint(const Model<float>& model, const std::string& path) {
  save_model(model, path);
}
void save_checkpoint(const Model<double>& model, const std::string& path) {
  save_model(model, path);
}

Model<float> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string blob = ss.str();
  if (blob.size() < 16) throw IoError("truncated checkpoint: " + path);
  if (std::memcmp(blob.data(), kMagic, 6) != 0)
    throw FormatError("not a checkpoint (bad magic): " + path);
  if (std::memcmp(blob.data() + 6, kMagic + 6, 2) != 0)
    throw VersionError("unsupported checkpoint version '" + blob.substr(6, 2) + "' in " + path);
  const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());
  const std::uint64_t header_len = read_u64_le(bytes + 8);
  if (16 + header_len > blob.size()) throw IoError("truncated checkpoint header: " + path);
  const std::string header = blob.substr(16, header_len);
  const std::size_t payload_off = 16 + header_len;

  ModelConfig cfg;
  std::vector<ManifestEntry> manifest;
  std::size_t declared_tensors = 0;
  std::istringstream hs(header);
  std::string line;
  auto parse_shape = [](const std::string& s) {
    std::vector<std::size_t> shape;
    std::istringstream is(s);
    std::string part;
    while (std::getline(is, part, 'x')) shape.push_back(std::stoull(part));
    return shape;
  };
  while (std::getline(hs, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("malformed checkpoint header line: " + line);
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (key == "arch") cfg.arch = parse_arch(val);
    else if (key == "variant") cfg.variant = parse_variant(val);
    else if (key == "n_layers") cfg.n_layers = std::stoull(val);
    else if (key == "n_heads") cfg.n_heads = std::stoull(val);
    else if (key == "head_dim") cfg.head_dim = std::stoull(val);
    else if (key == "model_dim") cfg.model_dim = std::stoull(val);
    else if (key == "ffn_dim") cfg.ffn_dim = std::stoull(val);
    else if (key == "vocab_size") cfg.vocab_size = std::stoull(val);
    else if (key == "max_seq_len") cfg.max_seq_len = std::stoull(val);
    else if (key == "dropout") cfg.dropout = std::stod(val);
    else if (key == "seed") cfg.seed = std::stoull(val);
    else if (key == "tensors") declared_tensors = std::stoull(val);
    else if (key == "tensor") {
      ManifestEntry e;
      const auto s1 = val.find(';');
      const auto s2 = val.find(';', s1 == std::string::npos ? s1 : s1 + 1);
      if (s1 == std::string::npos || s2 == std::string::npos)
        throw FormatError("malformed tensor manifest entry: " + val);
      e.name = val.substr(0, s1);
      e.shape = parse_shape(val.substr(s1 + 1, s2 - s1 - 1));
      e.offset = std::stoull(val.substr(s2 + 1));
      manifest.push_back(std::move(e));
    } else {
      throw FormatError("unknown checkpoint header key: " + key);
    }
  }
  if (manifest.size() != declared_tensors)
    throw FormatError("checkpoint declares " + std::to_string(declared_tensors) +
                      " tensors but lists " + std::to_string(manifest.size()));

  Model<float> model(cfg);
  auto params = model.parameters();
  if (params.size() != manifest.size())
    throw FormatError("checkpoint has " + std::to_string(manifest.size()) +
                      " tensors, model expects " + std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const ManifestEntry& e = manifest[i];
    auto& [name, t] = params[i];
    if (e.name != name)
      throw FormatError("checkpoint tensor '" + e.name + "' where '" + name + "' was expected");
    if (e.shape != t.shape())
      throw DimError("checkpoint tensor '" + e.name + "' has shape " +
                     detail::shape_str(e.shape) + ", model expects " +
                     detail::shape_str(t.shape()));
    const std::size_t need = payload_off + e.offset + t.numel() * 4;
    if (need > blob.size()) throw IoError("truncated checkpoint payload: " + path);
    const unsigned char* src = bytes + payload_off + e.offset;
    for (std::size_t j = 0; j < t.numel(); ++j) t.mut(j) = read_f32_le(src + j * 4);
  }
  return model;
}

}  // namespace mhelab
