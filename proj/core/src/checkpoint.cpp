#include "ugp/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "ugp/errors.hpp"

namespace ugp {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint codec assumes a little-endian host");

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, &value, sizeof(T));
  out.insert(out.end(), raw, raw + sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  [[nodiscard]] bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

constexpr std::string_view kVersionName = "_meta/version";
constexpr std::string_view kInputShapeName = "_meta/input_shape";

std::string layer_meta_name(std::size_t i) { return "_meta/trunk/" + std::to_string(i); }

}  // namespace

std::vector<std::uint8_t> encode_archive(const TensorArchive& archive) {
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  put<std::uint32_t>(out, kCheckpointFormatVersion);
  for (const auto& [name, tensor] : archive) {
    if (name.size() > 0xffff) throw FormatError("tensor name too long: " + name.substr(0, 64));
    if (tensor.rank() > 0xff) throw FormatError("tensor rank too large: " + name);
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put<std::uint8_t>(out, static_cast<std::uint8_t>(tensor.rank()));
    for (std::size_t d : tensor.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (double v : tensor.values()) put<double>(out, v);
  }
  return out;
}

TensorArchive decode_archive(std::span<const std::uint8_t> bytes) {
  Reader in(bytes);
  for (char c : kCheckpointMagic) {
    if (in.get<char>() != c) throw FormatError("not a checkpoint: bad magic");
  }
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointFormatVersion) {
    throw FormatError("unsupported checkpoint format version " + std::to_string(version));
  }
  TensorArchive archive;
  std::string previous;
  while (!in.done()) {
    const auto name_len = in.get<std::uint16_t>();
    std::string name = in.get_string(name_len);
    if (!archive.empty() && name <= previous) throw FormatError("checkpoint tensors out of order at '" + name + "'");
    const auto rank = in.get<std::uint8_t>();
    Shape shape(rank);
    for (auto& d : shape) d = in.get<std::uint32_t>();
    std::vector<double> values(shape_size(shape));
    for (double& v : values) v = in.get<double>();
    previous = name;
    archive.emplace(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  return archive;
}

void save_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  const auto bytes = encode_archive(archive);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

TensorArchive load_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_archive(bytes);
}

const Tensor& archive_at(const TensorArchive& archive, std::string_view name) {
  auto it = archive.find(name);
  if (it == archive.end()) throw FormatError("checkpoint is missing tensor '" + std::string(name) + "'");
  return it->second;
}

void export_network(const NetworkParams& params, TensorArchive& archive) {
  params.for_each_tensor([&](const std::string& name, const Tensor& t) { archive.insert_or_assign(name, t); });
  archive.insert_or_assign(std::string(kVersionName), Tensor({1}, {static_cast<double>(params.version)}));
  std::vector<double> dims(params.input_shape.begin(), params.input_shape.end());
  archive.insert_or_assign(std::string(kInputShapeName), Tensor({dims.size()}, dims));
  for (std::size_t i = 0; i < params.trunk.size(); ++i) {
    const LayerSpec& s = params.trunk[i].spec;
    archive.insert_or_assign(layer_meta_name(i),
                             Tensor({5}, {static_cast<double>(s.kind), static_cast<double>(s.filters),
                                          static_cast<double>(s.kernel), static_cast<double>(s.stride),
                                          static_cast<double>(s.width)}));
  }
}

NetworkParams import_network(const TensorArchive& archive) {
  const Tensor& dims = archive_at(archive, kInputShapeName);
  Shape input_shape;
  for (double d : dims.values()) input_shape.push_back(static_cast<std::size_t>(d));

  std::vector<LayerSpec> specs;
  for (std::size_t i = 0;; ++i) {
    auto it = archive.find(layer_meta_name(i));
    if (it == archive.end()) break;
    const Tensor& m = it->second;
    if (m.size() != 5) throw FormatError("bad layer description " + layer_meta_name(i));
    LayerSpec s;
    s.kind = static_cast<LayerKind>(static_cast<int>(m[0]));
    s.filters = static_cast<std::size_t>(m[1]);
    s.kernel = static_cast<std::size_t>(m[2]);
    s.stride = static_cast<std::size_t>(m[3]);
    s.width = static_cast<std::size_t>(m[4]);
    specs.push_back(s);
  }

  std::map<TaskId, std::size_t> tasks;
  for (const auto& [name, tensor] : archive) {
    if (!name.starts_with("head/") || !name.ends_with("/policy/bias")) continue;
    std::string_view task = NetworkParams::task_of(name);
    tasks.emplace(std::string(task), tensor.size());
  }

  NetworkParams params = build_network(specs, input_shape, tasks, 0);
  for (const std::string& name : params.tensor_names()) {
    const Tensor& stored = archive_at(archive, name);
    Tensor& target = *params.find(name);
    if (!stored.same_shape(target)) {
      throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_to_string(stored.shape()) +
                        ", architecture expects " + shape_to_string(target.shape()));
    }
    target = stored;
  }
  params.version = static_cast<std::uint64_t>(archive_at(archive, kVersionName)[0]);
  return params;
}

}  // namespace ugp
