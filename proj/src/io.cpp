#include "cpac/io.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <system_error>

namespace cpac {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string format_fixed(double v, int digits) {
  char buf[128];
  const auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed, digits);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& text, const std::string& what) {
  double v = 0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc{} || res.ptr != text.data() + text.size())
    throw ConfigError(what + ": not a number: '" + text + "'");
  return v;
}

std::int64_t parse_int(const std::string& text, const std::string& what) {
  std::int64_t v = 0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc{} || res.ptr != text.data() + text.size())
    throw ConfigError(what + ": not an integer: '" + text + "'");
  return v;
}

bool parse_bool(const std::string& text, const std::string& what) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw ConfigError(what + ": not a boolean: '" + text + "'");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

std::string join(const std::vector<Index>& v) {
  std::string out;
  for (std::size_t k = 0; k < v.size(); ++k) out += (k ? "," : "") + std::to_string(v[k]);
  return out;
}

// kernel_size, channels and rank are comma lists; a single value broadcasts
// to every layer and the longest list sets the layer count.
void set_layer_list(NetworkConfig& net, const std::string& key, const std::string& value) {
  const std::vector<std::string> items = split_list(value);
  if (items.empty()) throw ConfigError(key + ": empty list");
  std::vector<Index> vals;
  for (const std::string& it : items) vals.push_back(parse_int(it, key));
  if (vals.size() > net.layers.size()) net.layers.resize(vals.size(), net.layers.back());
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const Index v = vals.size() == 1 ? vals[0] : (l < vals.size() ? vals[l] : vals.back());
    if (key == "kernel_size") net.layers[l].kernel = v;
    else if (key == "channels") net.layers[l].channels = v;
    else net.layers[l].rank = v;
  }
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  NetworkConfig& n = network;
  TrainingConfig& t = network.training;
  if (key == "input_x") n.input_x = parse_int(value, key);
  else if (key == "input_y") n.input_y = parse_int(value, key);
  else if (key == "input_s") n.input_s = parse_int(value, key);
  else if (key == "classes") n.classes = parse_int(value, key);
  else if (key == "layers") {
    const Index count = parse_int(value, key);
    if (count < 1) throw ConfigError("layers must be at least 1");
    n.layers.resize(static_cast<std::size_t>(count), n.layers.back());
  } else if (key == "kernel_size" || key == "channels" || key == "rank") set_layer_list(n, key, value);
  else if (key == "baseline") n.baseline = parse_bool(value, key);
  else if (key == "rectifier") n.rectifier = parse_bool(value, key);
  else if (key == "learning_rate") t.learning_rate = parse_double(value, key);
  else if (key == "momentum") t.momentum = parse_double(value, key);
  else if (key == "epochs") t.epochs = static_cast<int>(parse_int(value, key));
  else if (key == "batch_size") t.batch_size = parse_int(value, key);
  else if (key == "seed") t.seed = static_cast<std::uint64_t>(parse_int(value, key));
  else if (key == "dataset") {
    if (value != "mnist" && value != "synthetic") throw ConfigError("dataset must be mnist or synthetic");
    dataset = value;
  } else if (key == "mnist_dir") mnist_dir = value;
  else if (key == "train_images") train_images = value;
  else if (key == "train_labels") train_labels = value;
  else if (key == "test_images") test_images = value;
  else if (key == "test_labels") test_labels = value;
  else if (key == "train_subset") train_subset = parse_int(value, key);
  else if (key == "test_subset") test_subset = parse_int(value, key);
  else if (key == "synthetic_train") synthetic_train = parse_int(value, key);
  else if (key == "synthetic_test") synthetic_test = parse_int(value, key);
  else if (key == "init") {
    if (value != "cold" && value != "als") throw ConfigError("init must be cold or als");
    init = value;
  } else if (key == "init_checkpoint") init_checkpoint = value;
  else if (key == "als_iters") als_iters = static_cast<int>(parse_int(value, key));
  else if (key == "out") out = value;
  else if (key == "deterministic") deterministic = parse_bool(value, key);
  else if (key == "threads") threads = static_cast<int>(parse_int(value, key));
  else throw ConfigError("unknown config key '" + key + "'");
}

void RunConfig::resolve_paths() {
  if (mnist_dir.empty()) return;
  const std::filesystem::path dir(mnist_dir);
  if (train_images.empty()) train_images = (dir / "train-images-idx3-ubyte").string();
  if (train_labels.empty()) train_labels = (dir / "train-labels-idx1-ubyte").string();
  if (test_images.empty()) test_images = (dir / "t10k-images-idx3-ubyte").string();
  if (test_labels.empty()) test_labels = (dir / "t10k-labels-idx1-ubyte").string();
}

std::string RunConfig::to_text() const {
  const NetworkConfig& n = network;
  const TrainingConfig& t = network.training;
  std::vector<Index> kernel, channels, rank;
  for (const ConvLayerConfig& c : n.layers) {
    kernel.push_back(c.kernel);
    channels.push_back(c.channels);
    rank.push_back(c.rank);
  }
  std::ostringstream os;
  os << "input_x=" << n.input_x << '\n'
     << "input_y=" << n.input_y << '\n'
     << "input_s=" << n.input_s << '\n'
     << "classes=" << n.classes << '\n'
     << "layers=" << n.layers.size() << '\n'
     << "kernel_size=" << join(kernel) << '\n'
     << "channels=" << join(channels) << '\n'
     << "rank=" << join(rank) << '\n'
     << "baseline=" << (n.baseline ? "true" : "false") << '\n'
     << "rectifier=" << (n.rectifier ? "true" : "false") << '\n'
     << "learning_rate=" << format_double(t.learning_rate) << '\n'
     << "momentum=" << format_double(t.momentum) << '\n'
     << "epochs=" << t.epochs << '\n'
     << "batch_size=" << t.batch_size << '\n'
     << "seed=" << t.seed << '\n'
     << "dataset=" << dataset << '\n';
  auto opt = [&](const char* key, const std::string& v) {
    if (!v.empty()) os << key << '=' << v << '\n';
  };
  opt("mnist_dir", mnist_dir);
  opt("train_images", train_images);
  opt("train_labels", train_labels);
  opt("test_images", test_images);
  opt("test_labels", test_labels);
  os << "train_subset=" << train_subset << '\n'
     << "test_subset=" << test_subset << '\n'
     << "synthetic_train=" << synthetic_train << '\n'
     << "synthetic_test=" << synthetic_test << '\n'
     << "init=" << init << '\n';
  opt("init_checkpoint", init_checkpoint);
  os << "als_iters=" << als_iters << '\n'
     << "out=" << out << '\n'
     << "deterministic=" << (deterministic ? "true" : "false") << '\n'
     << "threads=" << threads << '\n';
  return os.str();
}

RunConfig parse_run_config(std::istream& in, const std::string& source) {
  RunConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key=value");
    try {
      cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  return parse_run_config(in, path);
}

// ---------------------------------------------------------------------------

namespace {

class Reader {
 public:
  Reader(std::istream& in, std::string source) : in_(in), source_(std::move(source)) {}

  std::string word() {
    std::string w;
    if (!(in_ >> w)) fail("unexpected end of file");
    return w;
  }
  void expect(const std::string& w) {
    const std::string got = word();
    if (got != w) fail("expected '" + w + "', found '" + got + "'");
  }
  Index integer() {
    const std::string w = word();
    try {
      return parse_int(w, "integer");
    } catch (const ConfigError&) {
      fail("expected an integer, found '" + w + "'");
    }
  }
  double number() {
    const std::string w = word();
    try {
      return parse_double(w, "number");
    } catch (const ConfigError&) {
      fail("expected a number, found '" + w + "'");
    }
  }
  Matrix<double> matrix(const std::string& name) {
    expect("matrix");
    expect(name);
    const Index rows = integer(), cols = integer();
    if (rows < 0 || cols < 0) fail("negative matrix extent");
    Matrix<double> m(rows, cols);
    for (Index k = 0; k < m.size(); ++k) m.data()[k] = number();
    return m;
  }
  [[noreturn]] void fail(const std::string& msg) const { throw ConfigError(source_ + ": " + msg); }

 private:
  std::istream& in_;
  std::string source_;
};

void write_matrix(std::ostream& out, const std::string& name, const Matrix<double>& m) {
  out << "matrix " << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
  for (Index k = 0; k < m.size(); ++k) out << (k ? " " : "") << format_double(m.data()[k]);
  out << '\n';
}

void write_factors(std::ostream& out, const CpFactors<double>& f) {
  write_matrix(out, "x", f.x);
  write_matrix(out, "y", f.y);
  write_matrix(out, "s", f.s);
  write_matrix(out, "n", f.n);
}

CpFactors<double> read_factors(Reader& r) {
  Matrix<double> fx = r.matrix("x");
  Matrix<double> fy = r.matrix("y");
  Matrix<double> fs = r.matrix("s");
  Matrix<double> fn = r.matrix("n");
  return CpFactors<double>(std::move(fx), std::move(fy), std::move(fs), std::move(fn));
}

// The network part of a RunConfig, used as the checkpoint header.
std::string network_text(const NetworkConfig& net) {
  RunConfig rc;
  rc.network = net;
  std::istringstream all(rc.to_text());
  std::ostringstream keep;
  std::string line;
  static const char* keys[] = {"input_x", "input_y", "input_s", "classes", "layers", "kernel_size",
                               "channels", "rank", "baseline", "rectifier", "learning_rate",
                               "momentum", "epochs", "batch_size", "seed"};
  while (std::getline(all, line)) {
    const std::string key = line.substr(0, line.find('='));
    for (const char* k : keys)
      if (key == k) keep << line << '\n';
  }
  return keep.str();
}

}  // namespace

void write_checkpoint(const Network& net, std::ostream& out) {
  out << kCheckpointMagic << '\n';
  out << "config\n" << network_text(net.config()) << "end_config\n";
  const auto& stages = net.stages();
  for (std::size_t l = 0; l < stages.size(); ++l) {
    const ConvStage& st = stages[l];
    out << "stage " << l << ' ' << (st.is_cpac() ? "cpac" : "dense") << '\n';
    if (st.is_cpac()) {
      write_factors(out, st.factors());
    } else {
      const Tensor<double>& k = st.kernel();
      write_matrix(out, "kernel", k.matrix(k.size() / k.extent(3), k.extent(3)));
    }
  }
  out << "fc\n";
  write_matrix(out, "w", net.fc().w);
  write_matrix(out, "b", net.fc().b);
  out << "end\n";
}

Network read_checkpoint(std::istream& in, const std::string& source) {
  std::string line;
  if (!std::getline(in, line) || trim(line) != kCheckpointMagic)
    throw ConfigError(source + ": not a checkpoint (missing " + std::string(kCheckpointMagic) + " header)");
  if (!std::getline(in, line) || trim(line) != "config") throw ConfigError(source + ": missing config block");
  RunConfig rc;
  while (true) {
    if (!std::getline(in, line)) throw ConfigError(source + ": unterminated config block");
    line = trim(line);
    if (line == "end_config") break;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(source + ": malformed config line '" + line + "'");
    rc.set(line.substr(0, eq), line.substr(eq + 1));
  }
  const NetworkConfig cfg = rc.network;
  const std::vector<ShapeDescriptor> shapes = cfg.shapes();
  Reader r(in, source);
  std::vector<ConvStage> stages;
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    r.expect("stage");
    if (r.integer() != static_cast<Index>(l)) r.fail("stages out of order");
    const std::string kind = r.word();
    if (kind == "cpac") {
      stages.push_back({shapes[l], read_factors(r)});
    } else if (kind == "dense") {
      const ShapeDescriptor& g = shapes[l];
      Matrix<double> k = r.matrix("kernel");
      if (k.size() != g.d * g.d * g.s * g.n) r.fail("dense kernel size mismatch");
      stages.push_back({g, Tensor<double>({g.d, g.d, g.s, g.n}, Eigen::Map<Vector<double>>(k.data(), k.size()))});
    } else {
      r.fail("unknown stage kind '" + kind + "'");
    }
  }
  r.expect("fc");
  FcLayer<double> fc;
  fc.w = r.matrix("w");
  const Matrix<double> b = r.matrix("b");
  if (b.cols() != 1) r.fail("bias must be a column");
  fc.b = b.col(0);
  r.expect("end");
  return assemble_network(cfg, std::move(stages), std::move(fc));
}

void save_checkpoint(const Network& net, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write checkpoint " + path);
  write_checkpoint(net, out);
  if (!out) throw ConfigError("failed writing checkpoint " + path);
}

Network load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open checkpoint " + path);
  return read_checkpoint(in, path);
}

void save_tensor(const Tensor<double>& t, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  out << "CPACTENSOR1\nshape";
  for (Index e : t.shape()) out << ' ' << e;
  out << "\nvalues";
  for (Index k = 0; k < t.size(); ++k) out << ' ' << format_double(t.data()[k]);
  out << '\n';
}

Tensor<double> load_tensor(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open tensor file " + path);
  std::string line;
  if (!std::getline(in, line) || trim(line) != "CPACTENSOR1")
    throw ConfigError(path + ": not a tensor file (missing CPACTENSOR1 header)");
  if (!std::getline(in, line)) throw ConfigError(path + ": missing shape line");
  std::istringstream sl(line);
  Reader sr(sl, path);
  sr.expect("shape");
  Shape shape;
  std::string w;
  while (sl >> w) shape.push_back(parse_int(w, path + ": shape"));
  if (shape.empty()) throw ConfigError(path + ": empty shape");
  for (Index e : shape)
    if (e < 1) throw ConfigError(path + ": extents must be positive");
  Reader r(in, path);
  r.expect("values");
  Vector<double> data(shape_size(shape));
  for (Index k = 0; k < data.size(); ++k) data[k] = r.number();
  return Tensor<double>(std::move(shape), std::move(data));
}

void save_factors(const CpFactors<double>& f, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  out << "CPACFACTORS1\nrank " << f.rank() << '\n';
  write_factors(out, f);
}

CpFactors<double> load_factors(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open factor file " + path);
  Reader r(in, path);
  r.expect("CPACFACTORS1");
  r.expect("rank");
  const Index rank = r.integer();
  CpFactors<double> f = read_factors(r);
  if (f.rank() != rank) r.fail("rank header does not match factor matrices");
  return f;
}

}  // namespace cpac
