#include "tgar/parameters.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

namespace tgar {

std::size_t ParameterSet::index_of(const std::string& name) const {
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw RangeError("unknown parameter '" + name + "'");
  return static_cast<std::size_t>(it - names.begin());
}

std::size_t ParameterSet::add(std::string name, Tensor t) {
  if (std::find(names.begin(), names.end(), name) != names.end()) {
    throw DuplicateError("parameter '" + name + "' defined twice");
  }
  names.push_back(std::move(name));
  tensors.push_back(std::move(t));
  return tensors.size() - 1;
}

bool ParameterSet::compatible(const ParameterSet& other) const {
  if (names != other.names || tensors.size() != other.tensors.size()) return false;
  for (std::size_t i = 0; i < tensors.size(); ++i)
    if (!tensors[i].same_shape(other.tensors[i])) return false;
  return true;
}

ParameterSet ParameterSet::zeros_like() const {
  ParameterSet out;
  out.names = names;
  for (const auto& t : tensors) out.tensors.emplace_back(t.rows(), t.cols());
  return out;
}

ParameterSet Optimizer::step(const ParameterSet& params, const ParameterSet& grads) {
  if (!params.compatible(grads)) throw ShapeError("gradient layout does not match parameters");
  ParameterSet out = params;
  const double lr = config_.lr;
  ++t_;
  if (config_.kind == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < out.size(); ++i)
      for (std::size_t k = 0; k < out.tensors[i].size(); ++k)
        out.tensors[i][k] -= static_cast<real>(lr * grads.tensors[i][k]);
    return out;
  }
  if (m_.empty()) {
    for (const auto& t : params.tensors) {
      m_.emplace_back(t.rows(), t.cols());
      v_.emplace_back(t.rows(), t.cols());
    }
  }
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto& p = out.tensors[i];
    const auto& g = grads.tensors[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = g[k];
      m_[i][k] = static_cast<real>(b1 * m_[i][k] + (1 - b1) * gk);
      v_[i][k] = static_cast<real>(b2 * v_[i][k] + (1 - b2) * gk * gk);
      const double mh = m_[i][k] / c1;
      const double vh = v_[i][k] / c2;
      p[k] -= static_cast<real>(lr * mh / (std::sqrt(vh) + config_.eps));
    }
  }
  return out;
}

ParameterManager::ParameterManager(ParameterSet initial, OptimizerConfig optimizer, std::size_t retain)
    : optimizer_(optimizer), retain_(std::max<std::size_t>(1, retain)) {
  auto v = std::make_shared<ParameterVersion>();
  v->version = 0;
  v->params = std::move(initial);
  store(std::move(v));
}

void ParameterManager::store(std::shared_ptr<const ParameterVersion> v) {
  std::lock_guard lock(mu_);
  recent_.push_back(std::move(v));
  if (recent_.size() > retain_) {
    older_.emplace_back(recent_.front()->version, recent_.front());
    recent_.erase(recent_.begin());
  }
  std::erase_if(older_, [](const auto& e) { return e.second.expired(); });
}

std::shared_ptr<const ParameterVersion> ParameterManager::latest() const {
  std::lock_guard lock(mu_);
  return recent_.back();
}

std::uint64_t ParameterManager::latest_version() const { return latest()->version; }

std::shared_ptr<const ParameterVersion> ParameterManager::get(std::uint64_t version) const {
  std::lock_guard lock(mu_);
  for (const auto& v : recent_)
    if (v->version == version) return v;
  for (const auto& [ver, weak] : older_) {
    if (ver != version) continue;
    if (auto v = weak.lock()) return v;
  }
  throw RangeError("parameter version " + std::to_string(version) + " is not available");
}

std::shared_ptr<const ParameterVersion> ParameterManager::update(const ParameterSet& grads) {
  std::lock_guard serial(update_mu_);
  const auto base = latest();
  auto next = std::make_shared<ParameterVersion>();
  next->params = optimizer_.step(base->params, grads);
  next->version = base->version + 1;
  std::shared_ptr<const ParameterVersion> out = next;
  store(out);
  return out;
}

std::shared_ptr<const ParameterVersion> ParameterManager::publish(ParameterSet params) {
  std::lock_guard serial(update_mu_);
  const auto base = latest();
  if (!base->params.compatible(params)) throw ShapeError("published parameters do not match the model layout");
  auto next = std::make_shared<ParameterVersion>();
  next->params = std::move(params);
  next->version = base->version + 1;
  std::shared_ptr<const ParameterVersion> out = next;
  store(out);
  return out;
}

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

constexpr const char* kMagic = "TGAR-CHECKPOINT 1";

void put_f64(std::ostream& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  out.write(buf, 8);
}

double get_f64(std::istream& in) {
  unsigned char buf[8];
  in.read(reinterpret_cast<char*>(buf), 8);
  if (!in) throw ParseError("checkpoint payload is truncated", 0);
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

void write_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write " + tmp);
    out << kMagic << '\n';
    out << "spec_hash " << std::hex << c.spec_hash << std::dec << '\n';
    out << "version " << c.version << '\n';
    out << "step " << c.step << '\n';
    out << "tensors " << c.params.size() << '\n';
    for (std::size_t i = 0; i < c.params.size(); ++i) {
      out << "tensor " << c.params.names[i] << ' ' << c.params.tensors[i].rows() << ' ' << c.params.tensors[i].cols()
          << '\n';
    }
    out << "end\n";
    for (const auto& t : c.params.tensors)
      for (real v : t.values()) put_f64(out, static_cast<double>(v));
    if (!out) throw Error("failed writing " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(in, line) || line != kMagic) throw ParseError("not a checkpoint file (bad header)", lineno);
  Checkpoint c;
  auto field = [&](const char* key) {
    ++lineno;
    if (!std::getline(in, line)) throw ParseError(std::string("checkpoint header ends before '") + key + "'", lineno);
    std::istringstream s(line);
    std::string k;
    s >> k;
    if (k != key) throw ParseError(std::string("expected '") + key + "' in checkpoint header", lineno);
    std::string rest;
    std::getline(s >> std::ws, rest);
    return rest;
  };
  try {
    c.spec_hash = std::stoull(field("spec_hash"), nullptr, 16);
    c.version = std::stoull(field("version"));
    c.step = std::stoull(field("step"));
    const auto count = std::stoull(field("tensors"));
    std::vector<std::pair<std::size_t, std::size_t>> shapes;
    for (std::size_t i = 0; i < count; ++i) {
      std::istringstream s(field("tensor"));
      std::string name;
      std::size_t r = 0, cols = 0;
      if (!(s >> name >> r >> cols)) throw ParseError("malformed tensor line in checkpoint", lineno);
      c.params.names.push_back(name);
      shapes.emplace_back(r, cols);
    }
    field("end");
    for (const auto& [r, cols] : shapes) {
      Tensor t(r, cols);
      for (auto& v : t.values()) v = static_cast<real>(get_f64(in));
      c.params.tensors.push_back(std::move(t));
    }
  } catch (const std::invalid_argument&) {
    throw ParseError("malformed number in checkpoint header", lineno);
  } catch (const std::out_of_range&) {
    throw ParseError("number out of range in checkpoint header", lineno);
  }
  if (in.peek() != std::char_traits<char>::eof()) throw ParseError("trailing bytes after checkpoint payload", 0);
  return c;
}

}  // namespace tgar
