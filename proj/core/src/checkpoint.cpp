#include "crowdiv/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace crowdiv::ckpt {

namespace {

constexpr char kMagic[8] = {'C', 'R', 'W', 'D', 'C', 'K', 'P', 'T'};
constexpr char kTrailer[4] = {'E', 'N', 'D', '.'};

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
    return v;
  } else {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
}

class Writer {
 public:
  template <typename T>
  void put(T v) {
    static_assert(std::is_arithmetic_v<T>);
    v = to_little(v);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void raw(const char* data, std::size_t n) {
    bytes_.insert(bytes_.end(), reinterpret_cast<const std::uint8_t*>(data),
                  reinterpret_cast<const std::uint8_t*>(data) + n);
  }
  void string(const std::string& s) {
    put<std::uint64_t>(s.size());
    raw(s.data(), s.size());
  }
  void doubles(std::span<const double> xs) {
    for (double x : xs) put(x);
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    static_assert(std::is_arithmetic_v<T>);
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return to_little(v);
  }
  void raw(char* out, std::size_t n) {
    need(n);
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::string string() {
    const auto n = get<std::uint64_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void doubles(std::span<double> out) {
    need(out.size() * sizeof(double));
    for (double& x : out) x = get<double>();
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::uint64_t n) const {
    if (n > bytes_.size() - pos_) {
      throw CorruptCheckpoint("checkpoint truncated at byte " + std::to_string(pos_));
    }
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

void write_shape(Writer& w, const nn::NetworkShape& s) {
  for (int v : {s.k_frames, s.n_beams, s.num_tokens, s.embed_dim, s.scan_hidden1, s.scan_hidden2,
                s.head_hidden, s.disc_hidden}) {
    w.put<std::int32_t>(v);
  }
  w.put(s.v_max);
  w.put(s.w_max);
}

nn::NetworkShape read_shape(Reader& r) {
  nn::NetworkShape s;
  s.k_frames = r.get<std::int32_t>();
  s.n_beams = r.get<std::int32_t>();
  s.num_tokens = r.get<std::int32_t>();
  s.embed_dim = r.get<std::int32_t>();
  s.scan_hidden1 = r.get<std::int32_t>();
  s.scan_hidden2 = r.get<std::int32_t>();
  s.head_hidden = r.get<std::int32_t>();
  s.disc_hidden = r.get<std::int32_t>();
  s.v_max = r.get<double>();
  s.w_max = r.get<double>();
  return s;
}

// (rows, cols) of every block, in all_spans() order.
std::vector<std::pair<std::uint32_t, std::uint32_t>> block_shapes(const nn::NetworkParams& p) {
  std::vector<std::pair<std::uint32_t, std::uint32_t>> out;
  auto mat = [&](const nn::Matrix& m) {
    out.emplace_back(static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols()));
  };
  auto net = [&](const nn::DenseNet& n) {
    for (const auto& l : n.layers()) {
      mat(l.weight);
      out.emplace_back(static_cast<std::uint32_t>(l.bias.size()), 1u);
    }
  };
  mat(p.embedding);
  net(p.policy_backbone);
  net(p.policy_head);
  mat(p.log_std);
  net(p.value_backbone);
  net(p.value_head);
  net(p.disc_sa);
  net(p.disc_s);
  return out;
}

void write_adam(Writer& w, const nn::AdamState& a) {
  w.put<std::int64_t>(a.step);
  w.put(a.learning_rate);
  w.put(a.beta1);
  w.put(a.beta2);
  w.put(a.eps);
  w.put<std::uint64_t>(a.m.size());
  w.doubles(a.m);
  w.doubles(a.v);
}

nn::AdamState read_adam(Reader& r, std::size_t expected_size) {
  nn::AdamState a;
  a.step = r.get<std::int64_t>();
  a.learning_rate = r.get<double>();
  a.beta1 = r.get<double>();
  a.beta2 = r.get<double>();
  a.eps = r.get<double>();
  const auto n = r.get<std::uint64_t>();
  if (n != expected_size) {
    throw ShapeMismatch("optimizer state has " + std::to_string(n) + " entries, parameters have " +
                        std::to_string(expected_size));
  }
  if (n > r.remaining() / sizeof(double)) throw CorruptCheckpoint("optimizer state truncated");
  a.m.resize(n);
  a.v.resize(n);
  r.doubles(a.m);
  r.doubles(a.v);
  return a;
}

void write_world(Writer& w, const sim::World& world) {
  w.put<std::uint64_t>(world.agents.size());
  for (const auto& a : world.agents) {
    w.put(a.pose.x);
    w.put(a.pose.y);
    w.put(a.pose.heading);
    w.put(a.linear_vel);
    w.put(a.angular_vel);
    w.put(a.radius);
    w.put(a.goal.x);
    w.put(a.goal.y);
    w.put<std::int32_t>(a.token);
    w.put<std::uint8_t>(a.visible ? 1 : 0);
    w.put<std::uint8_t>(a.alive ? 1 : 0);
    w.put(a.speed_scale);
    w.put<std::int32_t>(a.episode_steps);
  }
  w.put<std::uint64_t>(world.circles.size());
  for (const auto& c : world.circles) {
    w.put(c.center.x);
    w.put(c.center.y);
    w.put(c.radius);
  }
  w.put<std::uint64_t>(world.rects.size());
  for (const auto& rc : world.rects) {
    w.put(rc.lo.x);
    w.put(rc.lo.y);
    w.put(rc.hi.x);
    w.put(rc.hi.y);
  }
  w.put(world.bounds.lo.x);
  w.put(world.bounds.lo.y);
  w.put(world.bounds.hi.x);
  w.put(world.bounds.hi.y);
  w.put<std::int64_t>(world.steps);
  w.put(world.dt);
  w.string(rng_to_string(world.rng));
}

std::uint64_t bounded_count(Reader& r, std::size_t min_bytes_each) {
  const auto n = r.get<std::uint64_t>();
  if (min_bytes_each > 0 && n > r.remaining() / min_bytes_each) {
    throw CorruptCheckpoint("element count exceeds file size");
  }
  return n;
}

sim::World read_world(Reader& r) {
  sim::World world;
  world.agents.resize(bounded_count(r, 8));
  for (auto& a : world.agents) {
    a.pose.x = r.get<double>();
    a.pose.y = r.get<double>();
    a.pose.heading = r.get<double>();
    a.linear_vel = r.get<double>();
    a.angular_vel = r.get<double>();
    a.radius = r.get<double>();
    a.goal.x = r.get<double>();
    a.goal.y = r.get<double>();
    a.token = r.get<std::int32_t>();
    a.visible = r.get<std::uint8_t>() != 0;
    a.alive = r.get<std::uint8_t>() != 0;
    a.speed_scale = r.get<double>();
    a.episode_steps = r.get<std::int32_t>();
  }
  world.circles.resize(bounded_count(r, 24));
  for (auto& c : world.circles) {
    c.center.x = r.get<double>();
    c.center.y = r.get<double>();
    c.radius = r.get<double>();
  }
  world.rects.resize(bounded_count(r, 32));
  for (auto& rc : world.rects) {
    rc.lo.x = r.get<double>();
    rc.lo.y = r.get<double>();
    rc.hi.x = r.get<double>();
    rc.hi.y = r.get<double>();
  }
  world.bounds.lo.x = r.get<double>();
  world.bounds.lo.y = r.get<double>();
  world.bounds.hi.x = r.get<double>();
  world.bounds.hi.y = r.get<double>();
  world.steps = r.get<std::int64_t>();
  world.dt = r.get<double>();
  world.rng = rng_from_string(r.string());
  return world;
}

}  // namespace

std::string rng_to_string(const sim::Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

sim::Rng rng_from_string(const std::string& state) {
  sim::Rng rng;
  std::istringstream is(state);
  is >> rng;
  if (!is) throw CorruptCheckpoint("unreadable RNG state");
  return rng;
}

std::vector<std::uint8_t> serialize(const Checkpoint& c) {
  Writer w;
  w.raw(kMagic, sizeof kMagic);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.params.shape.num_tokens));
  write_shape(w, c.params.shape);
  const auto shapes = block_shapes(c.params);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(shapes.size()));
  for (const auto& [rows, cols] : shapes) {
    w.put(rows);
    w.put(cols);
  }
  for (auto s : c.params.all_spans()) w.doubles(s);
  w.string(c.config_text);
  write_adam(w, c.adam_policy);
  write_adam(w, c.adam_value);
  write_adam(w, c.adam_disc_sa);
  write_adam(w, c.adam_disc_s);
  w.string(c.rng_state);
  w.put<std::int64_t>(c.update);
  w.put<std::uint8_t>(c.runtime ? 1 : 0);
  if (c.runtime) {
    write_world(w, c.runtime->world);
    w.put<std::uint64_t>(c.runtime->histories.size());
    for (const auto& agent : c.runtime->histories) {
      w.put<std::uint64_t>(agent.size());
      for (const auto& frame : agent) {
        w.put<std::uint64_t>(frame.size());
        w.doubles(frame);
      }
    }
    w.put<std::uint64_t>(c.runtime->recent_outcomes.size());
    for (auto o : c.runtime->recent_outcomes) w.put<std::uint8_t>(o);
  }
  w.raw(kTrailer, sizeof kTrailer);
  return w.take();
}

Checkpoint deserialize(std::span<const std::uint8_t> bytes, const nn::NetworkShape* expected) {
  Reader r(bytes);
  char magic[8];
  r.raw(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw CorruptCheckpoint("bad magic: not a crowdiv checkpoint");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw VersionMismatch("checkpoint format version " + std::to_string(version) +
                          ", this build reads version " + std::to_string(kCheckpointVersion));
  }
  const auto m = r.get<std::uint32_t>();
  const nn::NetworkShape shape = read_shape(r);
  if (static_cast<int>(m) != shape.num_tokens) {
    throw CorruptCheckpoint("header M does not match architecture descriptor");
  }
  try {
    shape.validate();
  } catch (const std::invalid_argument& e) {
    throw CorruptCheckpoint(std::string("invalid architecture descriptor: ") + e.what());
  }
  if (expected && !(*expected == shape)) {
    throw ShapeMismatch("checkpoint architecture (M=" + std::to_string(shape.num_tokens) +
                        ", beams=" + std::to_string(shape.n_beams) +
                        ") differs from the expected one (M=" + std::to_string(expected->num_tokens) +
                        ", beams=" + std::to_string(expected->n_beams) + ")");
  }

  Checkpoint c;
  c.params = nn::NetworkParams::zeros(shape);
  const auto want = block_shapes(c.params);
  const auto count = r.get<std::uint32_t>();
  if (count != want.size()) {
    throw ShapeMismatch("checkpoint has " + std::to_string(count) + " parameter blocks, expected " +
                        std::to_string(want.size()));
  }
  for (std::size_t i = 0; i < want.size(); ++i) {
    const auto rows = r.get<std::uint32_t>();
    const auto cols = r.get<std::uint32_t>();
    if (rows != want[i].first || cols != want[i].second) {
      throw ShapeMismatch("parameter block " + std::to_string(i) + " is " + std::to_string(rows) +
                          "x" + std::to_string(cols) + ", expected " +
                          std::to_string(want[i].first) + "x" + std::to_string(want[i].second));
    }
  }
  for (auto s : c.params.all_spans()) r.doubles(s);
  c.config_text = r.string();
  c.adam_policy = read_adam(r, nn::total_size(c.params.policy_group()));
  c.adam_value = read_adam(r, nn::total_size(c.params.value_group()));
  c.adam_disc_sa = read_adam(r, nn::total_size(c.params.disc_sa_group()));
  c.adam_disc_s = read_adam(r, nn::total_size(c.params.disc_s_group()));
  c.rng_state = r.string();
  c.update = r.get<std::int64_t>();
  const auto has_runtime = r.get<std::uint8_t>();
  if (has_runtime > 1) throw CorruptCheckpoint("bad runtime flag");
  if (has_runtime) {
    RuntimeSnapshot rt;
    rt.world = read_world(r);
    rt.histories.resize(bounded_count(r, 8));
    for (auto& agent : rt.histories) {
      agent.resize(bounded_count(r, 8));
      for (auto& frame : agent) {
        frame.resize(bounded_count(r, sizeof(double)));
        r.doubles(frame);
      }
    }
    rt.recent_outcomes.resize(bounded_count(r, 1));
    for (auto& o : rt.recent_outcomes) o = r.get<std::uint8_t>();
    c.runtime = std::move(rt);
  }
  char trailer[4];
  r.raw(trailer, sizeof trailer);
  if (std::memcmp(trailer, kTrailer, sizeof kTrailer) != 0 || r.remaining() != 0) {
    throw CorruptCheckpoint("bad trailer");
  }
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize(ckpt);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const nn::NetworkShape* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointNotFound("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes, expected);
}

}  // namespace crowdiv::ckpt
