#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "sdlm/model.hpp"
#include "sdlm/rng.hpp"

namespace sdlm {

namespace {

constexpr char kMagic[8] = {'S', 'D', 'L', 'M', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::string& buf, T v) {
  char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  buf.append(b, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& buf, std::size_t end, std::string src) : buf_(buf), end_(end), src_(std::move(src)) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == end_; }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) throw InputError(src_ + ": truncated checkpoint");
  }
  const std::string& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
  std::string src_;
};

std::string read_all(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot read checkpoint " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::uint64_t trailer_of(const std::string& buf, const std::string& src) {
  if (buf.size() < sizeof(kMagic) + sizeof(std::uint64_t)) throw InputError(src + ": file too short");
  std::uint64_t stored;
  std::memcpy(&stored, buf.data() + buf.size() - sizeof(stored), sizeof(stored));
  return stored;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const SdlmModel& model, const CheckpointMeta& meta) {
  nlohmann::json header{{"config", model.config().to_json()},
                        {"seed", meta.seed},
                        {"config_hash", meta.config_hash},
                        {"producer", meta.producer},
                        {"step", meta.step}};
  std::vector<std::string> names;
  for (std::size_t i = 0; i < model.doctrine.size(); ++i) names.push_back(model.doctrine.name(i));
  header["doctrine"] = names;

  auto tensors = model.named_tensors();
  if (model.doctrine.size() > 0) {
    Tensor emb({model.doctrine.size(), model.doctrine.width()});
    auto e = emb.mutable_data();
    for (std::size_t i = 0; i < model.doctrine.size(); ++i) {
      auto row = model.doctrine.embedding(i);
      std::copy(row.begin(), row.end(), e.begin() + static_cast<std::ptrdiff_t>(i * model.doctrine.width()));
    }
    tensors.emplace_back("doctrine.embeddings", emb);
  }

  std::string buf(kMagic, sizeof(kMagic));
  put(buf, kVersion);
  const std::string js = header.dump();
  put(buf, static_cast<std::uint64_t>(js.size()));
  buf += js;
  put(buf, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put(buf, static_cast<std::uint32_t>(name.size()));
    buf += name;
    put(buf, static_cast<std::uint32_t>(t.rank()));
    for (auto dim : t.shape()) put(buf, static_cast<std::uint64_t>(dim));
    for (double v : t.data()) put(buf, v);
  }
  put(buf, fnv1a64(buf.data(), buf.size()));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InputError("cannot write checkpoint " + path.string());
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw InputError("failed writing checkpoint " + path.string());
}

SdlmModel load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta) {
  const std::string src = path.string();
  const std::string buf = read_all(path);
  const std::uint64_t stored = trailer_of(buf, src);
  const std::size_t body = buf.size() - sizeof(stored);
  if (fnv1a64(buf.data(), body) != stored)
    throw InputError(src + ": checksum mismatch (corrupt checkpoint)");

  Reader r(buf, body, src);
  if (r.bytes(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) throw InputError(src + ": not a checkpoint");
  if (auto v = r.get<std::uint32_t>(); v != kVersion)
    throw InputError(src + ": unsupported checkpoint version " + std::to_string(v));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.bytes(r.get<std::uint64_t>()));
  } catch (const nlohmann::json::exception& e) {
    throw InputError(src + ": bad header: " + e.what());
  }

  SdlmModel model(ModelConfig::from_json(header.at("config")));
  if (meta) {
    meta->seed = header.value("seed", std::uint64_t{0});
    meta->config_hash = header.value("config_hash", std::string());
    meta->producer = header.value("producer", std::string());
    meta->step = header.value("step", std::uint64_t{0});
  }

  std::map<std::string, Tensor> loaded;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.bytes(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    if (rank > 2) throw InputError(src + ": tensor " + name + " has unsupported rank");
    Shape shape;
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
      n *= shape.back();
    }
    std::vector<double> data(n);
    for (auto& v : data) v = r.get<double>();
    loaded.emplace(std::move(name), Tensor(shape, std::move(data)));
  }
  if (!r.done()) throw InputError(src + ": trailing bytes before checksum");

  for (auto& [name, t] : model.named_tensors()) {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw InputError(src + ": missing tensor " + name);
    if (it->second.shape() != t.shape()) throw InputError(src + ": shape mismatch for " + name);
    auto s = it->second.data();
    Tensor dst = t;
    std::copy(s.begin(), s.end(), dst.mutable_data().begin());
  }

  const auto names = header.value("doctrine", std::vector<std::string>{});
  if (!names.empty()) {
    auto it = loaded.find("doctrine.embeddings");
    if (it == loaded.end() || it->second.rows() != names.size())
      throw InputError(src + ": doctrine embeddings missing or inconsistent");
    std::vector<std::vector<double>> embs;
    for (std::size_t i = 0; i < names.size(); ++i) {
      std::vector<double> row(it->second.cols());
      for (std::size_t c = 0; c < row.size(); ++c) row[c] = it->second(i, c);
      embs.push_back(std::move(row));
    }
    model.doctrine = DoctrineEmbeddingSet(names, std::move(embs), true);
  }
  return model;
}

std::uint64_t checkpoint_checksum(const std::filesystem::path& path) {
  const std::string buf = read_all(path);
  return trailer_of(buf, path.string());
}

}  // namespace sdlm
