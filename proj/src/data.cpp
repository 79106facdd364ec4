#include "s3t/data.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>

namespace s3t {

namespace {

constexpr char kMagic[4] = {'S', 'K', 'L', '1'};

void put_bytes(std::string& out, const void* p, std::size_t n) {
  out.append(static_cast<const char*>(p), n);
}

void put_u32(std::string& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  put_bytes(out, b, 4);
}

void put_u16(std::string& out, std::uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8)};
  put_bytes(out, b, 2);
}

void put_f32(std::string& out, float v) {
  put_u32(out, std::bit_cast<std::uint32_t>(v));
}

// Sequential reader that reports the byte offset of any truncation.
class ByteReader {
 public:
  ByteReader(std::string bytes, std::string origin)
      : bytes_(std::move(bytes)), origin_(std::move(origin)) {}

  std::size_t pos() const { return pos_; }

  void need(std::size_t n, const char* what) {
    if (pos_ + n > bytes_.size())
      fail<DataError>(origin_, ": truncated while reading ", what,
                      " at byte offset ", pos_, " (file is ", bytes_.size(),
                      " bytes)");
  }

  void raw(void* dst, std::size_t n, const char* what) {
    need(n, what);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    const unsigned char* b =
        reinterpret_cast<const unsigned char*>(bytes_.data() + pos_);
    pos_ += 4;
    return static_cast<std::uint32_t>(b[0]) |
           (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) |
           (static_cast<std::uint32_t>(b[3]) << 24);
  }

  std::uint16_t u16(const char* what) {
    need(2, what);
    const unsigned char* b =
        reinterpret_cast<const unsigned char*>(bytes_.data() + pos_);
    pos_ += 2;
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
  }

  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }

  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }

 private:
  std::string bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail<DataError>("cannot open ", path);
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

void write_atomic_bytes(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail<Error>("cannot write ", tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail<Error>("short write to ", tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

void write_skl(const std::string& path, const Dataset& data) {
  std::string out;
  put_bytes(out, kMagic, 4);
  put_u32(out, static_cast<std::uint32_t>(data.size()));
  for (const SkeletonSequence& seq : data) {
    check_rank(seq.frames, 4, "sequence frames");
    if (seq.frames.dim(1) != 3)
      fail<ShapeError>("sequence frames must be [T,3,N,M], got ",
                       seq.frames.dim(1), " coordinate channels");
    put_u32(out, static_cast<std::uint32_t>(seq.frames.dim(0)));
    out.push_back(static_cast<char>(seq.frames.dim(2)));
    out.push_back(static_cast<char>(seq.frames.dim(3)));
    put_u16(out, static_cast<std::uint16_t>(seq.label));
    put_u16(out, static_cast<std::uint16_t>(seq.subject));
    put_u16(out, static_cast<std::uint16_t>(seq.view));
    for (Index i = 0; i < seq.frames.size(); ++i) put_f32(out, seq.frames[i]);
  }
  write_atomic_bytes(path, out);
}

Dataset read_skl(const std::string& path, Index expected_nodes) {
  ByteReader r(slurp(path), path);
  char magic[4];
  r.raw(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0)
    fail<DataError>(path, ": bad magic, not a skeleton clip file");
  const std::uint32_t n = r.u32("sequence count");
  Dataset data;
  data.reserve(n);
  for (std::uint32_t s = 0; s < n; ++s) {
    SkeletonSequence seq;
    const std::uint32_t t_raw = r.u32("frame count");
    const Index nodes = r.u8("node count");
    const Index persons = r.u8("person count");
    if (t_raw < 1) fail<DataError>(path, ": sequence ", s, " has no frames");
    if (persons < 1 || persons > 2)
      fail<DataError>(path, ": sequence ", s, " has ", persons, " persons");
    if (expected_nodes >= 0 && nodes != expected_nodes)
      fail<ShapeError>(path, ": sequence ", s, " has ", nodes,
                       " joints, the graph expects ", expected_nodes);
    seq.label = r.u16("label");
    seq.subject = r.u16("subject");
    seq.view = r.u16("view");
    seq.frames = Tensor<float>({static_cast<Index>(t_raw), 3, nodes, persons});
    for (Index i = 0; i < seq.frames.size(); ++i)
      seq.frames[i] = r.f32("frame payload");
    for (Index i = 0; i < seq.frames.size(); ++i)
      if (!std::isfinite(seq.frames[i]))
        fail<DataError>(path, ": sequence ", s, " has a non-finite coordinate");
    data.push_back(std::move(seq));
  }
  return data;
}

Dataset synth_generate(const SynthSpec& raw_spec) {
  SynthSpec spec = raw_spec;
  spec.materialize_classes();
  spec.validate();

  const SkeletonGraph g = parse_graph_spec(spec.graph);
  const auto parent = g.parents();
  const Index N = g.n_nodes;

  // Static rest pose: hang each joint below its parent with a small
  // golden-angle lateral twist so no two joints coincide.
  std::vector<std::array<double, 3>> rest(static_cast<std::size_t>(N));
  std::vector<Index> depth(static_cast<std::size_t>(N), 0);
  rest[static_cast<std::size_t>(g.root)] = {0.0, 0.0, 0.0};
  for (Index v = 0; v < N; ++v) {
    if (parent[static_cast<std::size_t>(v)] < 0) continue;
    const auto& p = rest[static_cast<std::size_t>(parent[static_cast<std::size_t>(v)])];
    const double a = 2.399963 * static_cast<double>(v);
    rest[static_cast<std::size_t>(v)] = {p[0] + 0.10 * std::cos(a),
                                         p[1] - 0.12,
                                         p[2] + 0.10 * std::sin(a)};
    depth[static_cast<std::size_t>(v)] =
        depth[static_cast<std::size_t>(parent[static_cast<std::size_t>(v)])] + 1;
  }

  // subtree[k] = joints moved by an archetype rooted at k.
  auto in_subtree = [&](Index node, Index limb_root) {
    for (Index v = node; v >= 0; v = parent[static_cast<std::size_t>(v)]) {
      if (v == limb_root) return true;
      if (parent[static_cast<std::size_t>(v)] < 0) break;
    }
    return node == limb_root;
  };

  // Round-robin subject pool: two even ids for each odd one, so the parity
  // split lands at 2:1 train:test.
  const Index subject_pool[6] = {0, 2, 4, 6, 1, 3};

  Dataset data;
  data.reserve(static_cast<std::size_t>(spec.n_classes * spec.samples_per_class));
  for (Index k = 0; k < spec.n_classes; ++k) {
    const auto& archetypes = spec.classes[static_cast<std::size_t>(k)];
    for (Index s = 0; s < spec.samples_per_class; ++s) {
      Rng rng = Rng::derive(spec.seed,
                            static_cast<std::uint64_t>(k) * 1000003u +
                                static_cast<std::uint64_t>(s));
      SkeletonSequence seq;
      seq.label = k;
      seq.subject = subject_pool[s % 6];
      seq.view = s % 3;

      const Index t_raw =
          spec.t_raw_min +
          (spec.t_raw_max > spec.t_raw_min
               ? rng.uniform_index(spec.t_raw_max - spec.t_raw_min + 1)
               : 0);
      seq.frames = Tensor<float>({t_raw, 3, N, spec.persons});

      std::vector<double> phases(archetypes.size());
      for (std::size_t a = 0; a < archetypes.size(); ++a)
        phases[a] = archetypes[a].phase_jitter > 0
                        ? rng.uniform(0.0, archetypes[a].phase_jitter)
                        : 0.0;

      for (Index m = 0; m < spec.persons; ++m) {
        const double person_dx = 0.8 * static_cast<double>(m);
        const double person_phase = 0.8 * static_cast<double>(m);
        for (Index t = 0; t < t_raw; ++t) {
          const double time = static_cast<double>(t) / spec.fps;
          for (Index v = 0; v < N; ++v) {
            double pos[3] = {rest[static_cast<std::size_t>(v)][0] + person_dx,
                             rest[static_cast<std::size_t>(v)][1],
                             rest[static_cast<std::size_t>(v)][2]};
            for (std::size_t a = 0; a < archetypes.size(); ++a) {
              const SynthSpec::Archetype& arc = archetypes[a];
              if (!in_subtree(v, arc.limb_root)) continue;
              // Deeper joints swing further and lag behind, like a whip.
              const Index d = depth[static_cast<std::size_t>(v)] -
                              depth[static_cast<std::size_t>(arc.limb_root)];
              const double gain =
                  0.4 + 0.6 * std::min<double>(static_cast<double>(d), 3.0) / 3.0;
              pos[arc.axis] +=
                  arc.amplitude * gain *
                  std::sin(2.0 * std::numbers::pi * arc.freq_hz * time +
                           phases[a] + person_phase -
                           0.3 * static_cast<double>(d));
            }
            for (Index c = 0; c < 3; ++c) {
              double x = pos[c];
              if (spec.noise_sigma > 0) x += rng.normal(0.0, spec.noise_sigma);
              seq.frames.at4(t, c, v, m) = static_cast<float>(x);
            }
          }
        }
      }
      data.push_back(std::move(seq));
    }
  }
  return data;
}

Tensor<float> resample_and_center(const Tensor<float>& frames, Index T,
                                  Index root) {
  check_rank(frames, 4, "resample input");
  if (T < 1) fail<ConfigError>("target length must be >= 1, got ", T);
  const Index t_raw = frames.dim(0), N = frames.dim(2), M = frames.dim(3);
  if (frames.dim(1) != 3)
    fail<ShapeError>("resample expects [T,3,N,M], got ", frames.dim(1),
                     " channels");
  if (root < 0 || root >= N)
    fail<ConfigError>("root joint ", root, " outside skeleton of ", N);

  float origin[3];
  for (Index c = 0; c < 3; ++c) origin[c] = frames.at4(0, c, root, 0);

  Tensor<float> out({T, 3, N, M});
  for (Index t = 0; t < T; ++t) {
    if (t_raw < T && t >= t_raw) break;  // trailing zeros stay
    const Index src = t_raw > T ? (t * t_raw) / T : t;
    for (Index c = 0; c < 3; ++c)
      for (Index n = 0; n < N; ++n)
        for (Index m = 0; m < M; ++m)
          out.at4(t, c, n, m) = frames.at4(src, c, n, m) - origin[c];
  }
  return out;
}

void split_by_subject(const Dataset& data, std::vector<Index>& train,
                      std::vector<Index>& test) {
  train.clear();
  test.clear();
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].subject % 2 == 0)
      train.push_back(static_cast<Index>(i));
    else
      test.push_back(static_cast<Index>(i));
  }
}

Batch make_batch(const Dataset& data, const std::vector<Index>& indices,
                 Index T, Index root) {
  if (indices.empty()) fail<DataError>("empty batch");
  const Index B = static_cast<Index>(indices.size());
  const SkeletonSequence& first = data[static_cast<std::size_t>(indices[0])];
  const Index N = first.frames.dim(2), M = first.frames.dim(3);

  Batch batch;
  batch.x = Tensor<float>({T, B * M, 3, N});
  batch.labels.resize(static_cast<std::size_t>(B));
  for (Index b = 0; b < B; ++b) {
    const SkeletonSequence& seq =
        data[static_cast<std::size_t>(indices[static_cast<std::size_t>(b)])];
    if (seq.frames.dim(2) != N || seq.frames.dim(3) != M)
      fail<ShapeError>("batch mixes skeleton shapes: [", N, ",", M, "] vs [",
                       seq.frames.dim(2), ",", seq.frames.dim(3), "]");
    Tensor<float> r = resample_and_center(seq.frames, T, root);
    for (Index t = 0; t < T; ++t)
      for (Index m = 0; m < M; ++m)
        for (Index c = 0; c < 3; ++c)
          for (Index n = 0; n < N; ++n)
            batch.x.at4(t, b * M + m, c, n) = r.at4(t, c, n, m);
    batch.labels[static_cast<std::size_t>(b)] = seq.label;
  }
  return batch;
}

}  // namespace s3t
