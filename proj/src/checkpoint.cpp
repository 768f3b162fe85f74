#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include <nlohmann/json.hpp>

#include "seqmask/errors.hpp"
#include "seqmask/hash.hpp"
#include "seqmask/training.hpp"

namespace seqmask::training {

namespace {

constexpr char kMagic[8] = {'S', 'E', 'Q', 'M', 'A', 'S', 'K', '1'};
constexpr char kTrailer[8] = {'S', 'E', 'Q', 'M', 'A', 'S', 'K', 'E'};
constexpr uint8_t kF32 = 0;
constexpr uint8_t kI64 = 1;

class Writer {
 public:
  explicit Writer(std::ofstream& out) : out_(out) {}
  template <typename T>
  void pod(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), n); }

 private:
  std::ofstream& out_;
};

class Reader {
 public:
  Reader(const std::string& buf, std::string path) : buf_(buf), path_(std::move(path)) {}
  template <typename T>
  T pod() {
    T v;
    std::memcpy(&v, take(sizeof v), sizeof v);
    return v;
  }
  const char* take(std::size_t n) {
    if (n > buf_.size() - pos_) throw CorruptCheckpoint("corrupt checkpoint (truncated): " + path_);
    const char* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  const std::string& buf_;
  std::size_t pos_ = 0;
  std::string path_;
};

void write_tensors(Writer& w, const std::string& prefix, torch::nn::Module& m) {
  for (auto& [name, t] : models::named_tensors(m)) {
    const auto full = prefix + name;
    auto c = t.detach().contiguous();
    const uint8_t dtype = c.scalar_type() == torch::kLong ? kI64 : kF32;
    if (dtype == kF32) c = c.to(torch::kFloat32);
    w.pod<uint32_t>(static_cast<uint32_t>(full.size()));
    w.bytes(full.data(), full.size());
    w.pod<uint8_t>(dtype);
    w.pod<uint32_t>(static_cast<uint32_t>(c.dim()));
    for (auto d : c.sizes()) w.pod<int64_t>(d);
    const auto nbytes = static_cast<uint64_t>(c.numel() * c.element_size());
    w.pod<uint64_t>(nbytes);
    w.bytes(c.data_ptr(), nbytes);
  }
}

std::size_t tensor_count(torch::nn::Module& m) { return models::named_tensors(m).size(); }

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const models::EncoderState& encoder,
                     const models::MaskerState& masker, const TrainConfig& cfg, int64_t step) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint: " + path.string());
  nlohmann::ordered_json meta;
  meta["format_version"] = kCheckpointVersion;
  meta["config_hash"] = cfg.hash();
  meta["step"] = step;
  meta["seed"] = cfg.seed;
  meta["encoder_hash"] = sha256_hex(encoder.config.canonical());
  meta["masker_hash"] = sha256_hex(masker.config.canonical());
  meta["config"] = cfg.to_text();
  const auto meta_text = meta.dump();

  auto enc = encoder.net;
  auto msk = masker.net;
  Writer w(out);
  w.bytes(kMagic, sizeof kMagic);
  w.pod<uint32_t>(kCheckpointVersion);
  w.pod<uint64_t>(meta_text.size());
  w.bytes(meta_text.data(), meta_text.size());
  w.pod<uint64_t>(tensor_count(*enc) + tensor_count(*msk));
  write_tensors(w, "encoder.", *enc);
  write_tensors(w, "masker.", *msk);
  w.bytes(kTrailer, sizeof kTrailer);
  out.flush();
  if (!out) throw IoError("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  const std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto where = path.string();
  Reader r(buf, where);

  if (std::memcmp(r.take(sizeof kMagic), kMagic, sizeof kMagic) != 0) {
    throw CorruptCheckpoint("corrupt checkpoint (bad magic): " + where);
  }
  const auto version = r.pod<uint32_t>();
  if (version != kCheckpointVersion) {
    throw VersionMismatch("checkpoint format version " + std::to_string(version) +
                          " is not supported (expected " + std::to_string(kCheckpointVersion) +
                          "): " + where);
  }
  const auto meta_len = r.pod<uint64_t>();
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(std::string(r.take(meta_len), meta_len));
  } catch (const nlohmann::json::exception&) {
    throw CorruptCheckpoint("corrupt checkpoint (metadata): " + where);
  }

  Checkpoint ck;
  std::string config_text;
  std::string stored_hash;
  try {
    config_text = meta.at("config").get<std::string>();
    stored_hash = meta.at("config_hash").get<std::string>();
    ck.step = meta.at("step").get<int64_t>();
    if (meta.at("format_version").get<uint32_t>() != version) {
      throw CorruptCheckpoint("corrupt checkpoint (version fields disagree): " + where);
    }
  } catch (const nlohmann::json::exception&) {
    throw CorruptCheckpoint("corrupt checkpoint (metadata fields): " + where);
  }
  if (sha256_hex(config_text) != stored_hash) {
    throw HashMismatch("checkpoint config hash does not match its stored config: " + where);
  }
  ck.config = TrainConfig::parse(config_text);
  ck.encoder = models::make_encoder(ck.config.encoder, encoder_init_seed(ck.config.seed));
  ck.masker = models::make_masker(ck.config.masker, masker_init_seed(ck.config.seed));
  ck.encoder.meta = {stored_hash, ck.step, ck.config.seed};
  ck.masker.meta = {stored_hash, ck.step, ck.config.seed};

  auto enc_tensors = models::named_tensors(*ck.encoder.net);
  auto msk_tensors = models::named_tensors(*ck.masker.net);
  const auto count = r.pod<uint64_t>();
  if (count != enc_tensors.size() + msk_tensors.size()) {
    throw CorruptCheckpoint("corrupt checkpoint (tensor count): " + where);
  }
  std::set<std::string> seen;
  torch::NoGradGuard guard;
  for (uint64_t i = 0; i < count; ++i) {
    const auto name_len = r.pod<uint32_t>();
    std::string name(r.take(name_len), name_len);
    const auto dtype = r.pod<uint8_t>();
    const auto ndim = r.pod<uint32_t>();
    std::vector<int64_t> dims;
    for (uint32_t d = 0; d < ndim; ++d) dims.push_back(r.pod<int64_t>());
    const auto nbytes = r.pod<uint64_t>();
    const char* raw = r.take(nbytes);

    torch::Tensor* target = nullptr;
    if (name.rfind("encoder.", 0) == 0 && enc_tensors.count(name.substr(8))) {
      target = &enc_tensors.at(name.substr(8));
    } else if (name.rfind("masker.", 0) == 0 && msk_tensors.count(name.substr(7))) {
      target = &msk_tensors.at(name.substr(7));
    }
    if (target == nullptr || !seen.insert(name).second) {
      throw CorruptCheckpoint("corrupt checkpoint (unexpected tensor '" + name + "'): " + where);
    }
    const auto want = target->scalar_type() == torch::kLong ? kI64 : kF32;
    if (dtype != want || target->sizes() != torch::IntArrayRef(dims) ||
        nbytes != static_cast<uint64_t>(target->numel()) * (dtype == kI64 ? 8 : 4)) {
      throw CorruptCheckpoint("corrupt checkpoint (tensor '" + name + "' layout): " + where);
    }
    auto src = torch::from_blob(const_cast<char*>(raw), dims,
                                dtype == kI64 ? torch::kLong : torch::kFloat32);
    target->copy_(src);
  }
  if (std::memcmp(r.take(sizeof kTrailer), kTrailer, sizeof kTrailer) != 0 || !r.at_end()) {
    throw CorruptCheckpoint("corrupt checkpoint (trailer): " + where);
  }
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const TrainConfig& expected) {
  auto ck = load_checkpoint(path);
  if (ck.encoder.meta.config_hash != expected.hash()) {
    throw HashMismatch("checkpoint was written for a different config (hash " +
                       ck.encoder.meta.config_hash.substr(0, 12) + " vs expected " +
                       expected.hash().substr(0, 12) + "): " + path.string());
  }
  return ck;
}

}  // namespace seqmask::training
