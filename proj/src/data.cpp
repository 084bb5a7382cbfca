#include "nrsfm/data.hpp"

#include <algorithm>
#include <bit>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

namespace nrsfm {

// ---------------------------------------------------------------------------
// Scene

void Scene::validate() const {
  require(points >= 1, ErrorCode::InvalidArgument, "scene needs points");
  require(masks.size() == measurements.size(), ErrorCode::DimensionMismatch,
          "one mask per frame required");
  for (std::size_t f = 0; f < measurements.size(); ++f) {
    require(measurements[f].rows() == points && masks[f].size() == points,
            ErrorCode::DimensionMismatch,
            "frame " + std::to_string(f) + " has the wrong point count");
    require(masks[f].any(), ErrorCode::InvalidArgument,
            "frame " + std::to_string(f) + " has no visible point");
  }
  if (shapes) {
    require(shapes->size() == measurements.size(), ErrorCode::DimensionMismatch,
            "ground-truth shapes must cover every frame");
    for (const auto& s : *shapes)
      require(s.rows() == points, ErrorCode::DimensionMismatch,
              "ground-truth shape has the wrong point count");
  }
  if (cameras)
    require(cameras->size() == measurements.size(), ErrorCode::DimensionMismatch,
            "ground-truth cameras must cover every frame");
  if (normalization)
    require(normalization->size() == measurements.size(),
            ErrorCode::DimensionMismatch,
            "normalization records must cover every frame");
}

namespace {

bool same_camera(const CameraWeak& a, const CameraWeak& b) {
  return a.rotation == b.rotation && a.scale == b.scale &&
         a.translation == b.translation;
}

}  // namespace

bool operator==(const Scene& a, const Scene& b) {
  if (a.points != b.points || a.projection != b.projection ||
      a.measurements.size() != b.measurements.size() ||
      a.shapes.has_value() != b.shapes.has_value() ||
      a.cameras.has_value() != b.cameras.has_value() ||
      a.normalization.has_value() != b.normalization.has_value())
    return false;
  for (std::size_t f = 0; f < a.measurements.size(); ++f) {
    if (a.measurements[f] != b.measurements[f]) return false;
    if ((a.masks[f] != b.masks[f]).any()) return false;
    if (a.shapes && (*a.shapes)[f] != (*b.shapes)[f]) return false;
    if (a.cameras && !same_camera((*a.cameras)[f], (*b.cameras)[f])) return false;
    if (a.normalization) {
      const auto& x = (*a.normalization)[f];
      const auto& y = (*b.normalization)[f];
      if (x.centroid != y.centroid || x.scale != y.scale) return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Planted model

void PlantedSpec::validate() const {
  require(points >= 2, ErrorCode::InvalidArgument, "need at least two points");
  require(frames >= 1, ErrorCode::InvalidArgument, "need at least one frame");
  require(layers >= 1, ErrorCode::InvalidArgument, "need at least one layer");
  require(last_width >= 1 && first_width >= last_width,
          ErrorCode::InvalidArgument, "widths must satisfy K_1 >= K_N >= 1");
  require(code_sparsity >= 1 && code_sparsity <= last_width,
          ErrorCode::InvalidArgument, "code sparsity must lie in [1, K_N]");
  require(link_sparsity >= 1, ErrorCode::InvalidArgument,
          "link sparsity must be >= 1");
  require(noise_ratio >= 0.0, ErrorCode::InvalidArgument,
          "noise ratio must be >= 0");
  require(max_missing >= 0 && max_missing < points, ErrorCode::InvalidArgument,
          "max missing must be below the point count");
}

std::vector<int> PlantedSpec::widths() const {
  TrainConfig c;
  c.layers = layers;
  c.first_width = first_width;
  c.last_width = last_width;
  return c.widths();
}

Shape expand_code(const Vector& code, const ModelParams& params) {
  const int n = params.layers();
  require(code.size() == params.width(n - 1), ErrorCode::DimensionMismatch,
          "code length must equal K_N");
  Vector psi = code;
  for (int i = n - 1; i >= 1; --i) {
    const Matrix& d = params.dictionaries[i];
    Vector next = Vector::Zero(d.rows());
    for (Eigen::Index r = 0; r < d.rows(); ++r) {
      double acc = 0.0;
      for (Eigen::Index k = 0; k < d.cols(); ++k) acc += d(r, k) * psi[k];
      next[r] = acc;
    }
    psi = std::move(next);
  }
  const Matrix& d1 = params.dictionaries[0];
  Shape s(params.points, 3);
  for (Eigen::Index p = 0; p < params.points; ++p)
    for (int c = 0; c < 3; ++c) {
      double acc = 0.0;
      for (Eigen::Index k = 0; k < psi.size(); ++k) acc += d1(p, 3 * k + c) * psi[k];
      s(p, c) = acc;
    }
  return s;
}

namespace {

std::vector<Eigen::Index> choose_distinct(std::mt19937_64& rng, Eigen::Index n,
                                          Eigen::Index count) {
  std::vector<Eigen::Index> all(n);
  std::iota(all.begin(), all.end(), Eigen::Index{0});
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(count);
  std::sort(all.begin(), all.end());
  return all;
}

}  // namespace

PlantedScene synth_planted(const PlantedSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> gauss;
  std::uniform_real_distribution<double> magnitude(0.5, 1.5);

  PlantedScene out;
  const auto widths = spec.widths();
  out.params = make_params(spec.points, widths, 3, Activation::Relu);

  // D_1: zero-mean unit-norm atoms, so every expanded shape is centered.
  Matrix& d1 = out.params.dictionaries[0];
  for (Eigen::Index i = 0; i < d1.size(); ++i) d1.data()[i] = gauss(rng);
  for (Eigen::Index k = 0; k < d1.cols() / 3; ++k) {
    auto atom = d1.middleCols(3 * k, 3);
    atom.rowwise() -= atom.colwise().mean();
    atom /= atom.norm();
  }
  // D_2..D_N: sparse non-negative columns keep every code non-negative.
  for (int i = 1; i < spec.layers; ++i) {
    Matrix& d = out.params.dictionaries[i];
    const Eigen::Index nnz = std::min<Eigen::Index>(spec.link_sparsity, d.rows());
    for (Eigen::Index k = 0; k < d.cols(); ++k) {
      for (auto r : choose_distinct(rng, d.rows(), nnz)) d(r, k) = magnitude(rng);
      d.col(k).normalize();
    }
  }

  Scene& scene = out.scene;
  scene.points = spec.points;
  scene.projection = spec.projection;
  scene.shapes.emplace();
  scene.cameras.emplace();
  const Eigen::Index top = widths.back();
  for (std::size_t f = 0; f < spec.frames; ++f) {
    Vector code = Vector::Zero(top);
    for (auto k : choose_distinct(rng, top, spec.code_sparsity))
      code[k] = magnitude(rng);
    Shape s = expand_code(code, out.params);
    const CameraWeak cam = random_camera(rng(), spec.projection);
    scene.measurements.push_back(project(s, cam, spec.projection));
    scene.masks.push_back(all_visible(spec.points));
    scene.shapes->push_back(std::move(s));
    scene.cameras->push_back(cam);
    out.codes.push_back(std::move(code));
  }
  const std::uint64_t noise_seed = rng();
  const std::uint64_t missing_seed = rng();
  if (spec.noise_ratio > 0.0) scene = add_noise(scene, spec.noise_ratio, noise_seed);
  if (spec.max_missing > 0) scene = make_missing(scene, spec.max_missing, missing_seed);
  return out;
}

Scene make_missing(const Scene& scene, int max_missing, std::uint64_t seed) {
  require(max_missing >= 1 && max_missing < scene.points,
          ErrorCode::InvalidArgument,
          "max missing must satisfy 1 <= max_missing < P");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> count(1, max_missing);
  Scene out = scene;
  for (auto& mask : out.masks) {
    Mask hidden;
    do {
      hidden = mask;
      for (auto p : choose_distinct(rng, scene.points, count(rng))) hidden[p] = false;
    } while (!hidden.any());
    mask = hidden;
  }
  return out;
}

Scene add_noise(const Scene& scene, double ratio, std::uint64_t seed) {
  require(ratio >= 0.0, ErrorCode::InvalidArgument, "noise ratio must be >= 0");
  std::mt19937_64 rng(seed);
  Scene out = scene;
  for (auto& w : out.measurements) w = noise_perturb(w, ratio, rng());
  return out;
}

Scene center_frames(const Scene& scene) {
  Scene out = scene;
  for (std::size_t f = 0; f < out.frame_count(); ++f) {
    const Mask& mask = out.masks[f];
    Eigen::Vector2d sum = Eigen::Vector2d::Zero();
    for (Eigen::Index p = 0; p < out.points; ++p)
      if (mask[p]) sum += out.measurements[f].row(p).transpose();
    const Eigen::Vector2d centroid = sum / static_cast<double>(mask.count());
    out.measurements[f].rowwise() -= centroid.transpose();
    if (out.cameras) (*out.cameras)[f].translation -= centroid;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Text helpers

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

[[noreturn]] void parse_fail(std::size_t line, const std::string& what) {
  fail(ErrorCode::Parse, "line " + std::to_string(line) + ": " + what);
}

double parse_double(const std::string& s, std::size_t line) {
  if (s.empty()) parse_fail(line, "empty number");
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || errno == ERANGE)
    parse_fail(line, "invalid number '" + s + "'");
  return v;
}

long long parse_int(const std::string& s, std::size_t line) {
  if (s.empty()) parse_fail(line, "empty integer");
  char* end = nullptr;
  errno = 0;
  const long long v = std::strtoll(s.c_str(), &end, 10);
  if (end != s.c_str() + s.size() || errno == ERANGE)
    parse_fail(line, "invalid integer '" + s + "'");
  return v;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

void write_file_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::Io, "cannot open '" + tmp + "' for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      fail(ErrorCode::Io, "failed writing '" + path + "'");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    fail(ErrorCode::Io, "cannot move output into '" + path + "': " + ec.message());
  }
}

// ---------------------------------------------------------------------------
// Scene file

std::string format_scene(const Scene& scene) {
  scene.validate();
  std::ostringstream out;
  out << "# nrsfm scene\n[scene]\n";
  out << "version,1\n";
  out << "points," << scene.points << "\n";
  out << "frames," << scene.frame_count() << "\n";
  out << "projection," << to_string(scene.projection) << "\n";
  out << "[measurements]\nframe,point,u,v,visible\n";
  for (std::size_t f = 0; f < scene.frame_count(); ++f)
    for (Eigen::Index p = 0; p < scene.points; ++p)
      out << f << ',' << p << ',' << num(scene.measurements[f](p, 0)) << ','
          << num(scene.measurements[f](p, 1)) << ','
          << (scene.masks[f][p] ? 1 : 0) << '\n';
  if (scene.shapes) {
    out << "[shapes]\nframe,point,x,y,z\n";
    for (std::size_t f = 0; f < scene.frame_count(); ++f)
      for (Eigen::Index p = 0; p < scene.points; ++p) {
        const auto& s = (*scene.shapes)[f];
        out << f << ',' << p << ',' << num(s(p, 0)) << ',' << num(s(p, 1)) << ','
            << num(s(p, 2)) << '\n';
      }
  }
  if (scene.cameras) {
    out << "[cameras]\nframe,m11,m12,m21,m22,m31,m32,scale,t1,t2\n";
    for (std::size_t f = 0; f < scene.frame_count(); ++f) {
      const auto& c = (*scene.cameras)[f];
      out << f;
      for (int r = 0; r < 3; ++r)
        for (int j = 0; j < 2; ++j) out << ',' << num(c.rotation(r, j));
      out << ',' << num(c.scale) << ',' << num(c.translation[0]) << ','
          << num(c.translation[1]) << '\n';
    }
  }
  if (scene.normalization) {
    out << "[normalization]\nframe,cx,cy,scale\n";
    for (std::size_t f = 0; f < scene.frame_count(); ++f) {
      const auto& n = (*scene.normalization)[f];
      out << f << ',' << num(n.centroid[0]) << ',' << num(n.centroid[1]) << ','
          << num(n.scale) << '\n';
    }
  }
  return out.str();
}

namespace {

struct SectionSpec {
  const char* header;
  std::size_t fields;
  bool per_point;
};

const std::map<std::string, SectionSpec>& section_specs() {
  static const std::map<std::string, SectionSpec> specs = {
      {"measurements", {"frame,point,u,v,visible", 5, true}},
      {"shapes", {"frame,point,x,y,z", 5, true}},
      {"cameras", {"frame,m11,m12,m21,m22,m31,m32,scale,t1,t2", 10, false}},
      {"normalization", {"frame,cx,cy,scale", 4, false}},
  };
  return specs;
}

}  // namespace

Scene parse_scene(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  std::string section;
  bool expect_header = false;
  std::map<std::string, std::string> meta;
  std::map<std::string, std::vector<char>> seen;  // record coverage per section

  Scene scene;
  long long frames = -1;
  auto ensure_sized = [&]() {
    if (frames >= 0) return;
    for (const char* key : {"version", "points", "frames", "projection"})
      if (!meta.count(key))
        parse_fail(line_no, std::string("missing scene key '") + key + "'");
    if (meta["version"] != "1")
      fail(ErrorCode::Version, "unsupported scene version " + meta["version"]);
    scene.points = parse_int(meta["points"], line_no);
    frames = parse_int(meta["frames"], line_no);
    if (scene.points < 1 || frames < 0) parse_fail(line_no, "bad scene dimensions");
    try {
      scene.projection = parse_projection(meta["projection"]);
    } catch (const Error&) {
      parse_fail(line_no, "unknown projection '" + meta["projection"] + "'");
    }
    scene.measurements.assign(frames, Measurement::Zero(scene.points, 2));
    scene.masks.assign(frames, Mask::Constant(scene.points, false));
  };

  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (line.front() == '[') {
      if (line.back() != ']') parse_fail(line_no, "malformed section header");
      section = line.substr(1, line.size() - 2);
      if (section == "scene") {
        expect_header = false;
        continue;
      }
      if (!section_specs().count(section))
        parse_fail(line_no, "unknown section '" + section + "'");
      if (seen.count(section)) parse_fail(line_no, "duplicate section " + section);
      ensure_sized();
      const auto& spec = section_specs().at(section);
      seen[section].assign(spec.per_point ? frames * scene.points : frames, 0);
      if (section == "shapes")
        scene.shapes.emplace(frames, Shape::Zero(scene.points, 3));
      if (section == "cameras") scene.cameras.emplace(frames);
      if (section == "normalization") scene.normalization.emplace(frames);
      expect_header = true;
      continue;
    }
    const auto fields = split(line, ',');
    if (section.empty()) parse_fail(line_no, "record outside of any section");
    if (section == "scene") {
      if (fields.size() != 2) parse_fail(line_no, "expected key,value");
      meta[fields[0]] = fields[1];
      continue;
    }
    const auto& spec = section_specs().at(section);
    if (expect_header) {
      if (line != spec.header)
        parse_fail(line_no, "expected column header '" + std::string(spec.header) + "'");
      expect_header = false;
      continue;
    }
    if (fields.size() != spec.fields)
      parse_fail(line_no, "expected " + std::to_string(spec.fields) + " fields, got " +
                              std::to_string(fields.size()));
    const long long f = parse_int(fields[0], line_no);
    if (f < 0 || f >= frames) parse_fail(line_no, "frame index out of range");
    long long p = 0;
    if (spec.per_point) {
      p = parse_int(fields[1], line_no);
      if (p < 0 || p >= scene.points) parse_fail(line_no, "point index out of range");
    }
    auto& cover = seen[section][spec.per_point ? f * scene.points + p : f];
    if (cover) parse_fail(line_no, "duplicate record");
    cover = 1;
    if (section == "measurements") {
      scene.measurements[f](p, 0) = parse_double(fields[2], line_no);
      scene.measurements[f](p, 1) = parse_double(fields[3], line_no);
      if (fields[4] != "0" && fields[4] != "1")
        parse_fail(line_no, "visible must be 0 or 1");
      scene.masks[f][p] = fields[4] == "1";
    } else if (section == "shapes") {
      for (int c = 0; c < 3; ++c)
        (*scene.shapes)[f](p, c) = parse_double(fields[2 + c], line_no);
    } else if (section == "cameras") {
      auto& cam = (*scene.cameras)[f];
      for (int r = 0; r < 3; ++r)
        for (int j = 0; j < 2; ++j)
          cam.rotation(r, j) = parse_double(fields[1 + 2 * r + j], line_no);
      cam.scale = parse_double(fields[7], line_no);
      cam.translation = {parse_double(fields[8], line_no),
                         parse_double(fields[9], line_no)};
    } else {
      auto& n = (*scene.normalization)[f];
      n.centroid = {parse_double(fields[1], line_no), parse_double(fields[2], line_no)};
      n.scale = parse_double(fields[3], line_no);
    }
  }
  ensure_sized();
  if (!seen.count("measurements"))
    parse_fail(line_no, "missing [measurements] section");
  for (const auto& [name, cover] : seen)
    if (std::find(cover.begin(), cover.end(), 0) != cover.end())
      parse_fail(line_no, "section [" + name + "] is incomplete (truncated file?)");
  try {
    scene.validate();
  } catch (const Error& e) {
    parse_fail(line_no, e.what());
  }
  return scene;
}

void save_scene(const Scene& scene, const std::string& path) {
  write_file_atomic(path, format_scene(scene));
}

Scene load_scene(const std::string& path) {
  try {
    return parse_scene(read_file(path));
  } catch (const Error& e) {
    if (e.code() == ErrorCode::Io) throw;
    fail(e.code(), path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Checkpoint

namespace {

void append_le(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

double read_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

struct NamedTensors {
  std::vector<TensorView> views;
  std::string prefix;
};

}  // namespace

void save_checkpoint(const TrainState& state, const std::string& path) {
  const TrainConfig& c = state.config;
  std::ostringstream h;
  h << "nrsfm-checkpoint\n";
  h << "version " << kCheckpointVersion << "\n";
  h << "points " << state.params.points << "\n";
  h << "block_rows " << state.params.block_rows << "\n";
  h << "activation " << to_string(state.params.activation) << "\n";
  h << "layers " << c.layers << "\n";
  h << "first_width " << c.first_width << "\n";
  h << "last_width " << c.last_width << "\n";
  h << "translation " << (c.translation ? 1 : 0) << "\n";
  h << "batch_size " << c.batch_size << "\n";
  h << "total_steps " << c.total_steps << "\n";
  h << "base_learning_rate " << num(c.base_learning_rate) << "\n";
  h << "decay_factor " << num(c.decay_factor) << "\n";
  h << "decay_steps " << c.decay_steps << "\n";
  h << "seed " << c.seed << "\n";
  h << "eval_interval " << c.eval_interval << "\n";
  h << "renormalize_dictionaries " << (c.renormalize_dictionaries ? 1 : 0) << "\n";
  h << "step " << state.step << "\n";
  h << "adam_step " << state.adam.step << "\n";
  h << "skipped_since_record " << state.skipped_since_record << "\n";
  h << "total_skipped " << state.total_skipped << "\n";
  h << "history " << state.history.size() << "\n";
  for (const auto& r : state.history)
    h << "record " << r.step << ' ' << num(r.learning_rate) << ' ' << num(r.mean_loss)
      << ' ' << num(r.coherence) << ' ' << num(r.error) << ' ' << r.skipped << "\n";

  const std::vector<std::pair<std::string, const ModelParams*>> groups = {
      {"params.", &state.params},
      {"adam_m.", &state.adam.first_moment},
      {"adam_v.", &state.adam.second_moment}};
  std::size_t count = 0;
  for (const auto& g : groups) count += g.second->tensors().size();
  h << "tensors " << count << "\n";
  std::string blob;
  for (const auto& [prefix, params] : groups)
    for (const auto& t : params->tensors()) {
      h << "tensor " << prefix << t.name << ' ' << t.rows << ' ' << t.cols << "\n";
      for (Eigen::Index i = 0; i < t.rows * t.cols; ++i) append_le(blob, t.data[i]);
    }
  h << "end\n";
  write_file_atomic(path, h.str() + blob);
}

TrainState load_checkpoint(const std::string& path) {
  const std::string content = read_file(path);
  std::size_t pos = 0;
  std::size_t line_no = 0;
  auto next_line = [&]() -> std::string {
    const auto nl = content.find('\n', pos);
    if (nl == std::string::npos)
      fail(ErrorCode::Parse, path + ": truncated checkpoint header");
    std::string line = content.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    return line;
  };
  auto bad = [&](const std::string& what) -> void {
    fail(ErrorCode::Parse, path + ": line " + std::to_string(line_no) + ": " + what);
  };
  if (next_line() != "nrsfm-checkpoint") bad("not an nrsfm checkpoint");

  std::map<std::string, std::string> kv;
  std::vector<HistoryRecord> history;
  std::vector<std::tuple<std::string, Eigen::Index, Eigen::Index>> manifest;
  for (;;) {
    const std::string line = next_line();
    if (line == "end") break;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "record") {
      HistoryRecord r;
      std::string lr, loss, coh, err;
      if (!(ls >> r.step >> lr >> loss >> coh >> err >> r.skipped)) bad("bad history record");
      r.learning_rate = parse_double(lr, line_no);
      r.mean_loss = parse_double(loss, line_no);
      r.coherence = parse_double(coh, line_no);
      r.error = parse_double(err, line_no);
      history.push_back(r);
    } else if (key == "tensor") {
      std::string name;
      Eigen::Index rows = 0, cols = 0;
      if (!(ls >> name >> rows >> cols) || rows < 0 || cols < 0) bad("bad tensor entry");
      manifest.emplace_back(name, rows, cols);
    } else {
      std::string value;
      if (!(ls >> value)) bad("missing value for '" + key + "'");
      kv[key] = value;
      if (key == "version" && value != std::to_string(kCheckpointVersion))
        fail(ErrorCode::Version, path + ": checkpoint format version " + value +
                                     " is not supported (expected " +
                                     std::to_string(kCheckpointVersion) + ")");
    }
  }
  auto get = [&](const std::string& key) -> std::string {
    auto it = kv.find(key);
    if (it == kv.end()) fail(ErrorCode::Parse, path + ": missing header key '" + key + "'");
    return it->second;
  };
  auto get_int = [&](const std::string& key) { return parse_int(get(key), line_no); };
  if (!kv.count("version")) fail(ErrorCode::Parse, path + ": missing version");

  TrainState state;
  TrainConfig& c = state.config;
  c.layers = static_cast<int>(get_int("layers"));
  c.first_width = static_cast<int>(get_int("first_width"));
  c.last_width = static_cast<int>(get_int("last_width"));
  c.translation = get_int("translation") != 0;
  c.activation = parse_activation(get("activation"));
  c.batch_size = static_cast<int>(get_int("batch_size"));
  c.total_steps = get_int("total_steps");
  c.base_learning_rate = parse_double(get("base_learning_rate"), line_no);
  c.decay_factor = parse_double(get("decay_factor"), line_no);
  c.decay_steps = get_int("decay_steps");
  c.seed = std::stoull(get("seed"));
  c.eval_interval = get_int("eval_interval");
  c.renormalize_dictionaries = get_int("renormalize_dictionaries") != 0;
  c.validate();
  if (get_int("block_rows") != c.block_rows())
    fail(ErrorCode::Parse, path + ": block_rows disagrees with translation flag");
  if (static_cast<std::size_t>(get_int("history")) != history.size())
    fail(ErrorCode::Parse, path + ": history record count mismatch");
  state.history = std::move(history);
  state.step = get_int("step");
  state.skipped_since_record = get_int("skipped_since_record");
  state.total_skipped = get_int("total_skipped");

  const Eigen::Index points = get_int("points");
  state.params = make_params(points, c.widths(), c.block_rows(), c.activation);
  state.adam = make_adam_state(state.params);
  state.adam.step = get_int("adam_step");

  std::vector<TensorView> expected;
  for (auto [prefix, params] :
       {std::pair<std::string, ModelParams*>{"params.", &state.params},
        {"adam_m.", &state.adam.first_moment},
        {"adam_v.", &state.adam.second_moment}})
    for (auto t : params->tensors()) {
      t.name = prefix + t.name;
      expected.push_back(t);
    }
  if (manifest.size() != expected.size() ||
      static_cast<std::size_t>(get_int("tensors")) != manifest.size())
    fail(ErrorCode::DimensionMismatch, path + ": tensor count does not match the model");
  std::size_t offset = pos;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const auto& [name, rows, cols] = manifest[i];
    const auto& e = expected[i];
    if (name != e.name || rows != e.rows || cols != e.cols)
      fail(ErrorCode::DimensionMismatch,
           path + ": tensor " + name + " (" + std::to_string(rows) + "x" +
               std::to_string(cols) + ") does not match expected " + e.name + " (" +
               std::to_string(e.rows) + "x" + std::to_string(e.cols) + ")");
    const std::size_t bytes = static_cast<std::size_t>(rows * cols) * 8;
    if (offset + bytes > content.size())
      fail(ErrorCode::Parse, path + ": truncated tensor data for " + name);
    const auto* raw = reinterpret_cast<const unsigned char*>(content.data() + offset);
    for (Eigen::Index j = 0; j < rows * cols; ++j) e.data[j] = read_le(raw + 8 * j);
    offset += bytes;
  }
  if (offset != content.size())
    fail(ErrorCode::Parse, path + ": trailing bytes after tensor data");
  state.params.validate();
  return state;
}

// ---------------------------------------------------------------------------
// History report

void write_history(const std::vector<HistoryRecord>& history,
                   const std::vector<std::string>& header,
                   const std::string& path) {
  std::ostringstream out;
  for (const auto& h : header) out << "# " << h << "\n";
  out << "step,learning_rate,mean_loss,coherence,error,skipped\n";
  for (const auto& r : history)
    out << r.step << ',' << num(r.learning_rate) << ',' << num(r.mean_loss) << ','
        << num(r.coherence) << ',' << num(r.error) << ',' << r.skipped << "\n";
  write_file_atomic(path, out.str());
}

}  // namespace nrsfm
