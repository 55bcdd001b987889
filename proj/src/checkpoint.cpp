#include "bachprop/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace bachprop::io {

namespace {

constexpr char kMagic[8] = {'B', 'P', 'C', 'H', 'K', 'P', 'T', '1'};

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), 8);
}

void put_i64(std::ostream& os, std::int64_t v) { put_u64(os, static_cast<std::uint64_t>(v)); }

void put_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(os, bits);
}

void put_table(std::ostream& os, const std::vector<int>& table) {
  put_u64(os, table.size());
  for (const int v : table) put_i64(os, v);
}

void put_string(std::ostream& os, const std::string& s) {
  put_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char buf[8];
  is.read(reinterpret_cast<char*>(buf), 8);
  if (!is) throw CheckpointError("unexpected end of file");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = v << 8 | buf[i];
  return v;
}

std::int64_t get_i64(std::istream& is) { return static_cast<std::int64_t>(get_u64(is)); }

double get_f64(std::istream& is) {
  const std::uint64_t bits = get_u64(is);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

std::vector<int> get_table(std::istream& is) {
  const std::uint64_t n = get_u64(is);
  std::vector<int> table;
  table.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) table.push_back(static_cast<int>(get_i64(is)));
  return table;
}

std::string get_string(std::istream& is) {
  const std::uint64_t n = get_u64(is);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw CheckpointError("unexpected end of file");
  return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const model::ModelParams& params,
                     const CheckpointMeta& meta) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open " + path.string() + " for writing");
  os.write(kMagic, 8);
  put_u64(os, 1);  // container version
  put_string(os, model::to_string(params.arch.variant));
  const model::ModelDims& d = params.arch.dims;
  put_i64(os, d.gru_width);
  put_i64(os, d.mlp_width);
  put_i64(os, d.mlp_context);
  for (const int w : d.polydac_widths) put_i64(os, w);
  put_table(os, params.dicts.dt_table);
  put_table(os, params.dicts.t_table);
  put_table(os, params.dicts.p_table);
  put_u64(os, params.theta.size());
  for (const double v : params.theta) put_f64(os, v);
  put_string(os, meta.config_echo);
  put_u64(os, meta.seed);
  if (!os) throw CheckpointError("write failure on " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw CheckpointError("bad magic in " + path.string());
  const std::uint64_t version = get_u64(is);
  if (version != 1) throw CheckpointError("unsupported container version");

  const std::string variant = get_string(is);
  model::ModelDims dims;
  dims.gru_width = static_cast<int>(get_i64(is));
  dims.mlp_width = static_cast<int>(get_i64(is));
  dims.mlp_context = static_cast<int>(get_i64(is));
  for (int& w : dims.polydac_widths) w = static_cast<int>(get_i64(is));

  Dictionaries dicts;
  dicts.dt_table = get_table(is);
  dicts.t_table = get_table(is);
  dicts.p_table = get_table(is);

  LoadedCheckpoint loaded;
  loaded.params = model::build_variant(variant, dicts, dims);
  const std::uint64_t n = get_u64(is);
  if (n != loaded.params.theta.size())
    throw CheckpointError("parameter count does not match declared shapes");
  for (std::uint64_t i = 0; i < n; ++i) loaded.params.theta[i] = get_f64(is);
  loaded.meta.config_echo = get_string(is);
  loaded.meta.seed = get_u64(is);
  return loaded;
}

}  // namespace bachprop::io
