#include "coeforge/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <vector>

#include "coeforge/errors.hpp"

namespace coeforge {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
}

std::uint32_t get_u32(const std::string& in, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[off + i])) << (8 * i);
  return v;
}

std::uint64_t get_u64(const std::string& in, std::size_t off) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[off + i])) << (8 * i);
  return v;
}

struct BlockRef {
  std::string name;
  const Matrix* matrix;
  std::uint32_t kind;
};

std::vector<BlockRef> collect_blocks(const ModelParams& p) {
  std::vector<BlockRef> blocks;
  p.for_each_base([&](const std::string& n, const Matrix& m) { blocks.push_back({n, &m, 0}); });
  p.for_each_adapter([&](const std::string& n, const Matrix& m) { blocks.push_back({n, &m, 1}); });
  return blocks;
}

}  // namespace

std::string serialize_checkpoint(const ModelParams& params) {
  const auto blocks = collect_blocks(params);
  std::uint64_t data_offset = kDirectoryOffset + blocks.size() * kDirectoryEntrySize;
  std::uint64_t total = data_offset;
  for (const auto& b : blocks) total += static_cast<std::uint64_t>(b.matrix->size()) * 8;

  std::string out;
  out.reserve(static_cast<std::size_t>(total));
  out.append("COEF");
  put_u32(out, kCheckpointVersion);
  const ModelShape& s = params.shape;
  for (int v : {s.layers, s.heads, s.dim, s.ff_dim, s.context, s.vocab, s.adapter_rank, s.adapter_alpha}) {
    put_u32(out, static_cast<std::uint32_t>(v));
  }
  put_u32(out, s.final_norm ? 1U : 0U);
  put_u32(out, static_cast<std::uint32_t>(blocks.size()));
  put_u64(out, kDirectoryOffset);
  put_u64(out, total);

  for (const auto& b : blocks) {
    if (b.name.size() >= kBlockNameSize) throw InternalError("block name too long: " + b.name);
    std::string name = b.name;
    name.resize(kBlockNameSize, '\0');
    out.append(name);
    put_u32(out, static_cast<std::uint32_t>(b.matrix->rows()));
    put_u32(out, static_cast<std::uint32_t>(b.matrix->cols()));
    put_u64(out, data_offset);
    put_u32(out, b.kind);
    put_u32(out, 0);
    data_offset += static_cast<std::uint64_t>(b.matrix->size()) * 8;
  }
  for (const auto& b : blocks) {
    const Matrix& m = *b.matrix;  // row-major storage
    for (Eigen::Index i = 0; i < m.size(); ++i) put_u64(out, std::bit_cast<std::uint64_t>(m.data()[i]));
  }
  return out;
}

ModelParams deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < kDirectoryOffset) throw LoadError("checkpoint truncated: header incomplete");
  if (bytes.compare(0, 4, "COEF") != 0) throw LoadError("checkpoint has bad magic (expected COEF)");
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kCheckpointVersion) {
    throw LoadError("checkpoint version mismatch: file " + std::to_string(version) + ", expected " +
                    std::to_string(kCheckpointVersion));
  }
  ModelShape shape;
  int* fields[] = {&shape.layers, &shape.heads, &shape.dim, &shape.ff_dim, &shape.context, &shape.vocab,
                   &shape.adapter_rank, &shape.adapter_alpha};
  for (std::size_t i = 0; i < std::size(fields); ++i) *fields[i] = static_cast<int>(get_u32(bytes, 8 + 4 * i));
  shape.final_norm = (get_u32(bytes, 40) & 1U) != 0;
  try {
    shape.validate();
  } catch (const InputError& e) {
    throw LoadError(std::string("checkpoint header: ") + e.what());
  }
  const std::uint32_t count = get_u32(bytes, 44);
  const std::uint64_t dir = get_u64(bytes, 48);
  const std::uint64_t total = get_u64(bytes, 56);
  if (dir != kDirectoryOffset) throw LoadError("checkpoint directory offset is not 64");
  if (total != bytes.size()) {
    throw LoadError("checkpoint truncated: header declares " + std::to_string(total) + " bytes, file has " +
                    std::to_string(bytes.size()));
  }
  if (dir + static_cast<std::uint64_t>(count) * kDirectoryEntrySize > bytes.size()) {
    throw LoadError("checkpoint truncated: directory incomplete");
  }

  struct Entry {
    std::uint32_t rows, cols;
    std::uint64_t offset;
  };
  std::map<std::string, Entry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t e = static_cast<std::size_t>(dir) + i * kDirectoryEntrySize;
    std::string name = bytes.substr(e, kBlockNameSize);
    name.resize(std::strlen(name.c_str()));
    Entry entry{get_u32(bytes, e + 40), get_u32(bytes, e + 44), get_u64(bytes, e + 48)};
    const std::uint64_t need = static_cast<std::uint64_t>(entry.rows) * entry.cols * 8;
    if (entry.offset > bytes.size() || need > bytes.size() - entry.offset) {
      throw LoadError("checkpoint truncated: block " + name + " extends past end of file");
    }
    entries.emplace(std::move(name), entry);
  }

  ModelParams params = ModelParams::initialize(shape, 0);
  auto fill = [&](const std::string& name, Matrix& m) {
    auto it = entries.find(name);
    if (it == entries.end()) throw LoadError("checkpoint missing block " + name);
    const Entry& e = it->second;
    if (e.rows != m.rows() || e.cols != m.cols()) throw LoadError("checkpoint block " + name + " has wrong shape");
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      m.data()[i] = std::bit_cast<double>(get_u64(bytes, static_cast<std::size_t>(e.offset) + 8 * static_cast<std::size_t>(i)));
    }
  };
  params.for_each_base(fill);
  params.for_each_adapter(fill);
  return params;
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(params);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw LoadError("cannot open checkpoint for writing: " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw LoadError("failed writing checkpoint: " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw LoadError("cannot open checkpoint: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace coeforge
