#include "cpac/commands.hpp"

#include "cpac/tensor_ops.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <thread>

namespace cpac {

namespace fs = std::filesystem;

int guarded(const std::function<int()>& body, std::ostream& err) {
  try {
    return body();
  } catch (const TrainingError& e) {
    err << "error: diverged: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const DataError& e) {
    err << "error: data: " << e.what() << '\n';
    return kExitData;
  } catch (const std::invalid_argument& e) {
    err << "error: config: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::out_of_range& e) {
    err << "error: config: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

std::string metrics_csv_row(const MetricsRow& row) {
  return std::to_string(row.epoch) + "," + row.split + "," + format_double(row.loss) + "," +
         format_double(row.accuracy) + "," + format_double(row.wall_time) + "," + std::to_string(row.m1) + "," +
         std::to_string(row.m2) + "," + row.cr;
}

namespace {

std::string scientific(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::scientific, 2);
  return std::string(buf, res.ptr);
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw ConfigError("cannot create output directory " + dir);
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  return out;
}

std::string require_path(const std::string& value, const char* key) {
  if (value.empty()) throw ConfigError(std::string(key) + " is not set (set mnist_dir or the four file paths)");
  return value;
}

Dataset load_split(RunConfig cfg, bool test) {
  const NetworkConfig& net = cfg.network;
  const std::uint64_t seed = net.training.seed;
  Dataset ds;
  if (cfg.dataset == "mnist") {
    cfg.resolve_paths();
    if (test)
      ds = load_idx(require_path(cfg.test_images, "test_images"), require_path(cfg.test_labels, "test_labels"), "test");
    else
      ds = load_idx(require_path(cfg.train_images, "train_images"), require_path(cfg.train_labels, "train_labels"),
                    "train");
    const Index n = test ? cfg.test_subset : cfg.train_subset;
    if (n > 0 && n < ds.size()) ds = subset(ds, n, test ? seed + 1 : seed);
  } else {
    if (net.input_s != 1) throw ConfigError("synthetic data has one channel; set input_s=1");
    ds = test ? synthetic_shapes(seed + 1, cfg.synthetic_test, net.input_x, net.input_y, net.classes, "test")
              : synthetic_shapes(seed, cfg.synthetic_train, net.input_x, net.input_y, net.classes, "train");
  }
  if (ds.x != net.input_x || ds.y != net.input_y || ds.s != net.input_s)
    throw ConfigError("data images are " + std::to_string(ds.x) + "x" + std::to_string(ds.y) + "x" +
                      std::to_string(ds.s) + " but the network expects " + std::to_string(net.input_x) + "x" +
                      std::to_string(net.input_y) + "x" + std::to_string(net.input_s));
  if (ds.classes > net.classes)
    throw ConfigError("data has " + std::to_string(ds.classes) + " classes but classes=" +
                      std::to_string(net.classes));
  return ds;
}

// Tiles the N channel maps of a P x N layer output side by side, one blank column apart.
Matrix<double> map_image(const Matrix<double>& map, const ShapeDescriptor& g) {
  const Tensor<double> v = fold_output(map, g.x, g.y, g.d);
  const Index ox = g.out_x(), oy = g.out_y(), n = map.cols();
  Matrix<double> img = Matrix<double>::Constant(ox, n * oy + n - 1, map.minCoeff());
  for (Index c = 0; c < n; ++c)
    for (Index x = 0; x < ox; ++x)
      for (Index y = 0; y < oy; ++y) img(x, c * (oy + 1) + y) = v(x, y, c);
  return img;
}

Matrix<double> unit_scaled(const Matrix<double>& m) {
  const double lo = m.minCoeff(), hi = m.maxCoeff();
  if (hi == lo) return Matrix<double>::Zero(m.rows(), m.cols());
  return (m.array() - lo) / (hi - lo);
}

}  // namespace

std::pair<Dataset, Dataset> load_datasets(const RunConfig& cfg) {
  cfg.network.validate();
  return {load_split(cfg, false), load_split(cfg, true)};
}

Network initial_network(const RunConfig& cfg) {
  if (cfg.init == "cold") return Network::build(cfg.network);
  if (cfg.network.baseline) throw ConfigError("init=als needs a CPAC network (baseline=false)");
  if (cfg.init_checkpoint.empty()) throw ConfigError("init=als needs init_checkpoint");
  const Network base = load_checkpoint(cfg.init_checkpoint);
  if (!base.config().baseline) throw ConfigError(cfg.init_checkpoint + " is not a baseline checkpoint");
  const std::vector<ShapeDescriptor> shapes = cfg.network.shapes();
  if (base.stages().size() != shapes.size() || base.config().classes != cfg.network.classes)
    throw ConfigError(cfg.init_checkpoint + " does not match the configured architecture");
  CpAlsOptions als;
  als.max_iters = cfg.als_iters;
  als.seed = cfg.network.training.seed;
  als.restarts = 2;
  std::vector<ConvStage> stages;
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    if (!(base.stages()[l].shape == shapes[l]))
      throw ConfigError(cfg.init_checkpoint + ": layer " + std::to_string(l + 1) + " geometry differs");
    const CpAlsResult<double> res = cp_als(base.stages()[l].kernel(), cfg.network.layers[l].rank, als);
    stages.push_back({shapes[l], normalize_factors(res.factors)});
  }
  return assemble_network(cfg.network, std::move(stages), base.fc());
}

TrainOutcome run_training(RunConfig cfg, std::ostream& log) {
  cfg.network.validate();
  if (cfg.dataset == "mnist") cfg.resolve_paths();
  auto [train, test] = load_datasets(cfg);
  ensure_dir(cfg.out);
  const fs::path dir(cfg.out);
  open_out(dir / "config.resolved") << cfg.to_text();
  open_out(dir / "provenance.txt") << "train: " << train.provenance << "\ntest: " << test.provenance << '\n';

  Network net = initial_network(cfg);
  std::ofstream metrics = open_out(dir / "metrics.csv");
  std::ofstream timing = open_out(dir / "timing.csv");
  metrics << kMetricsHeader << '\n';
  timing << "epoch,split,wall_time\n";

  FitOptions fo;
  const int hw = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  fo.exec.threads = cfg.deterministic ? 1 : (cfg.threads > 0 ? cfg.threads : hw);
  fo.on_row = [&](const MetricsRow& row) {
    MetricsRow written = row;
    if (cfg.deterministic) written.wall_time = 0;
    metrics << metrics_csv_row(written) << '\n' << std::flush;
    timing << row.epoch << ',' << row.split << ',' << format_double(row.wall_time) << '\n' << std::flush;
    log << "epoch " << row.epoch << ' ' << row.split << ": loss " << format_fixed(row.loss, 4) << ", accuracy "
        << format_fixed(row.accuracy, 4) << " (" << format_fixed(row.wall_time, 1) << " s)\n"
        << std::flush;
  };
  std::vector<MetricsRow> rows = fit(net, train, test, fo);
  save_checkpoint(net, (dir / "model.ckpt").string());
  return {std::move(net), std::move(rows)};
}

int cmd_train(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  return guarded(
      [&] {
        const TrainOutcome res = run_training(cfg, out);
        const ParamCounts pc = param_counts(cfg.network);
        out << "M1 " << pc.m1 << ", M2 " << (cfg.network.baseline ? pc.m1 : pc.m2) << ", CR "
            << (res.rows.empty() ? compression_ratio(cfg.network).str() : res.rows.back().cr) << '\n';
        out << "wrote " << (fs::path(cfg.out) / "metrics.csv").string() << " and "
            << (fs::path(cfg.out) / "model.ckpt").string() << '\n';
        return kExitOk;
      },
      err);
}

// ---------------------------------------------------------------------------

namespace {

const char* describe_block(const std::string& name) {
  if (name == "KN") return "dV/dK^N";
  if (name == "KX") return "dV/dK^X";
  if (name == "KY") return "dV/dK^Y";
  if (name == "KS") return "dV/dK^S";
  if (name == "input") return "dL/dU";
  if (name == "fc_w") return "dL/dW";
  if (name == "fc_b") return "dL/db";
  return "dL/dy";
}

}  // namespace

int cmd_gradcheck(const GradcheckOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(
      [&] {
        std::ofstream csv;
        if (!opts.out_dir.empty()) {
          ensure_dir(opts.out_dir);
          csv = open_out(fs::path(opts.out_dir) / "gradcheck.csv");
          csv << "config,x,y,s,n,d,R,block,check,rel_error,pass\n";
        }
        if (opts.fault != Fault::none) out << "injected fault: " << to_string(opts.fault) << '\n';
        const std::vector<GradcheckCase> grid = gradcheck_grid();
        std::vector<std::pair<std::string, double>> worst_fd, worst_fast;
        std::vector<std::string> failures;
        out << std::left << std::setw(24) << "config";
        bool header_done = false;
        for (std::size_t k = 0; k < grid.size(); ++k) {
          const GradcheckResult res = run_gradcheck(grid[k], opts.seed + k, opts.fault);
          if (!header_done) {
            for (const auto& [name, e] : res.fd) out << std::setw(10) << name;
            for (const auto& [name, e] : res.fast) out << std::setw(10) << ("fast:" + name);
            out << "status\n";
            worst_fd = res.fd;
            worst_fast = res.fast;
            header_done = true;
          }
          out << std::setw(24) << grid[k].label();
          for (std::size_t b = 0; b < res.fd.size(); ++b) {
            out << std::setw(10) << scientific(res.fd[b].second);
            worst_fd[b].second = std::max(worst_fd[b].second, res.fd[b].second);
          }
          for (std::size_t b = 0; b < res.fast.size(); ++b) {
            out << std::setw(10) << scientific(res.fast[b].second);
            worst_fast[b].second = std::max(worst_fast[b].second, res.fast[b].second);
          }
          const std::vector<std::string> bad = res.failures();
          out << (bad.empty() ? "ok" : "FAIL") << '\n';
          for (const std::string& b : bad) failures.push_back(b + " at " + grid[k].label());
          if (csv) {
            const GradcheckCase& c = grid[k];
            const std::string prefix = "\"" + c.label() + "\"," + std::to_string(c.x) + "," + std::to_string(c.y) +
                                       "," + std::to_string(c.s) + "," + std::to_string(c.n) + "," +
                                       std::to_string(c.d) + "," + std::to_string(c.rank) + ",";
            for (const auto& [name, e] : res.fd)
              csv << prefix << name << ",fd," << format_double(e) << ',' << (e < kGradcheckTolerance ? 1 : 0) << '\n';
            for (const auto& [name, e] : res.fast)
              csv << prefix << name << ",fast_vs_kronecker," << format_double(e) << ','
                  << (e < kPathTolerance ? 1 : 0) << '\n';
          }
        }
        out << "\nmax relative error per block (tolerance " << scientific(kGradcheckTolerance)
            << " vs finite differences, " << scientific(kPathTolerance) << " fast vs Kronecker):\n";
        for (const auto& [name, e] : worst_fd)
          out << "  " << std::setw(8) << name << std::setw(10) << describe_block(name) << scientific(e) << '\n';
        for (const auto& [name, e] : worst_fast)
          out << "  " << std::setw(8) << ("fast:" + name) << std::setw(10) << describe_block(name) << scientific(e)
              << '\n';
        if (!failures.empty()) {
          for (const std::string& f : failures) err << "FAIL " << f << '\n';
          return kExitGradcheck;
        }
        out << "all " << grid.size() << " configurations pass\n";
        return kExitOk;
      },
      err);
}

int cmd_decompose(const DecomposeOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(
      [&] {
        Tensor<double> kernel;
        if (!opts.kernel_file.empty()) {
          kernel = load_tensor(opts.kernel_file);
        } else if (!opts.checkpoint.empty()) {
          const Network net = load_checkpoint(opts.checkpoint);
          if (opts.layer < 1 || opts.layer > static_cast<Index>(net.stages().size()))
            throw std::out_of_range("layer " + std::to_string(opts.layer) + " out of range");
          const ConvStage& st = net.stages()[static_cast<std::size_t>(opts.layer - 1)];
          if (st.is_cpac()) throw ConfigError("layer " + std::to_string(opts.layer) + " is not a dense kernel");
          kernel = st.kernel();
        } else {
          throw ConfigError("decompose needs a kernel file or a checkpoint");
        }
        if (kernel.order() != 4 || kernel.extent(0) != kernel.extent(1))
          throw ShapeError("kernel must be a d x d x S x N tensor, got " + to_string(kernel.shape()));
        const CpAlsResult<double> res = cp_als(kernel, opts.rank, opts.als);
        save_factors(res.factors, opts.out);
        std::ofstream trace = open_out(opts.out + ".trace.csv");
        trace << "iteration,fit_error\n";
        for (std::size_t k = 0; k < res.error_trace.size(); ++k)
          trace << k + 1 << ',' << format_double(res.error_trace[k]) << '\n';

        const Index m1 = kernel.size();
        const Index m2 = res.factors.parameter_count();
        const Index g = std::gcd(m1, m2);
        out << "kernel " << to_string(kernel.shape()) << ", rank " << opts.rank << '\n'
            << "fit error " << scientific(res.error()) << " after " << res.iterations << " iterations ("
            << res.starts << " start" << (res.starts == 1 ? "" : "s") << ")\n"
            << "M1 " << m1 << ", M2 " << m2 << ", CR " << CompressionRatio{m2 / g, m1 / g}.str() << '\n'
            << "wrote " << opts.out << '\n';
        return kExitOk;
      },
      err);
}

// ---------------------------------------------------------------------------

void write_pgm(const Matrix<double>& image, const std::string& path) {
  std::ofstream out = open_out(path);
  const Matrix<double> scaled = unit_scaled(image);
  out << "P2\n" << image.cols() << ' ' << image.rows() << "\n255\n";
  for (Index r = 0; r < image.rows(); ++r) {
    for (Index c = 0; c < image.cols(); ++c) {
      const long v = std::lround(255.0 * scaled(r, c));
      out << v << ((c + 1) % 16 == 0 || c + 1 == image.cols() ? '\n' : ' ');
    }
  }
}

InspectReport run_inspect(const InspectOptions& opts, std::ostream& log) {
  const Network net = load_checkpoint(opts.checkpoint);
  const Index layers = static_cast<Index>(net.stages().size());
  if (opts.layer < 1 || opts.layer > layers)
    throw std::out_of_range("layer " + std::to_string(opts.layer) + " out of range [1, " + std::to_string(layers) + "]");
  const ConvStage& st = net.stages()[static_cast<std::size_t>(opts.layer - 1)];
  if (!st.is_cpac()) throw ConfigError("layer " + std::to_string(opts.layer) + " is not a CPAC layer");

  RunConfig data = opts.data;
  data.network = net.config();
  const Dataset ds = load_split(data, true);
  if (opts.sample < 0 || opts.sample >= ds.size())
    throw std::out_of_range("sample " + std::to_string(opts.sample) + " out of range [0, " +
                            std::to_string(ds.size()) + ")");

  InspectReport rep;
  rep.maps = feature_maps(net, ds.image(opts.sample), opts.layer - 1);
  rep.ranking = significance_ranking(st.factors());
  for (const Significance& s : rep.ranking)
    rep.correlation.push_back(correlation(rep.maps.ranks[static_cast<std::size_t>(s.rank)], rep.maps.overall));

  ensure_dir(opts.out_dir);
  const fs::path dir(opts.out_dir);
  const ShapeDescriptor& g = rep.maps.shape;
  write_pgm(map_image(rep.maps.overall, g), (dir / "overall.pgm").string());
  const Index rank = static_cast<Index>(rep.maps.ranks.size());
  for (Index r = 0; r < rank; ++r)
    write_pgm(map_image(rep.maps.ranks[static_cast<std::size_t>(r)], g),
              (dir / ("rank_" + std::to_string(r + 1) + ".pgm")).string());

  // Overall map on top, then one band per rank group; each band scaled on its own.
  const Matrix<double> top = map_image(rep.maps.overall, g);
  const Index band = top.rows() + 1;
  Matrix<double> montage = Matrix<double>::Zero(band * (rank + 1) - 1, top.cols());
  montage.topRows(top.rows()) = unit_scaled(top);
  for (Index r = 0; r < rank; ++r)
    montage.block(band * (r + 1), 0, top.rows(), top.cols()) =
        unit_scaled(map_image(rep.maps.ranks[static_cast<std::size_t>(r)], g));
  write_pgm(montage, (dir / "montage.pgm").string());

  std::ofstream csv = open_out(dir / "significance.csv");
  csv << "r,norm,correlation\n";
  log << "layer " << opts.layer << ", sample " << opts.sample << " (label "
      << ds.labels[static_cast<std::size_t>(opts.sample)] << ")\n"
      << "  r   ||K_r^S||   corr(rank map, overall)\n";
  for (std::size_t k = 0; k < rep.ranking.size(); ++k) {
    const Significance& s = rep.ranking[k];
    csv << s.rank + 1 << ',' << format_double(s.norm) << ',' << format_double(rep.correlation[k]) << '\n';
    log << std::right << std::setw(3) << s.rank + 1 << "  " << std::setw(10) << format_fixed(s.norm, 6) << "  "
        << std::setw(10) << format_fixed(rep.correlation[k], 6) << '\n';
  }
  log << "wrote " << rank + 2 << " graymaps and significance.csv to " << opts.out_dir << '\n';
  return rep;
}

int cmd_inspect(const InspectOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(
      [&] {
        run_inspect(opts, out);
        return kExitOk;
      },
      err);
}

// ---------------------------------------------------------------------------

int cmd_sweep(const RunConfig& cfg, const std::vector<Index>& ranks, std::ostream& out, std::ostream& err) {
  return guarded(
      [&] {
        cfg.network.validate();
        std::vector<Index> list = ranks;
        if (list.empty()) list.push_back(cfg.network.layers.front().rank);
        for (Index r : list)
          if (r < 1) throw ConfigError("rank must be at least 1, got " + std::to_string(r));
        ensure_dir(cfg.out);
        std::ofstream csv = open_out(fs::path(cfg.out) / "sweep.csv");
        csv << kSweepHeader << '\n';

        int status = kExitOk;
        auto run = [&](RunConfig rc, const std::string& model, const std::string& rank_field) {
          out << "== " << model << (rank_field.empty() ? "" : " R=" + rank_field) << " ==\n";
          std::vector<MetricsRow> rows;
          const int code = guarded(
              [&] {
                rows = run_training(rc, out).rows;
                return kExitOk;
              },
              err);
          if (code != kExitOk && status == kExitOk) status = code;
          const ParamCounts pc = param_counts(rc.network);
          const Index m2 = rc.network.baseline ? pc.m1 : pc.m2;
          const std::string cr = rc.network.baseline ? CompressionRatio{1, 1}.str() : compression_ratio(rc.network).str();
          const MetricsRow* train = nullptr;
          const MetricsRow* test = nullptr;
          for (const MetricsRow& r : rows) (r.split == "train" ? train : test) = &r;
          auto field = [](const MetricsRow* r, bool loss) {
            return r ? format_double(loss ? r->loss : r->accuracy) : std::string();
          };
          csv << model << ',' << rank_field << ',' << pc.m1 << ',' << m2 << ',' << cr << ','
              << (train ? train->epoch : 0) << ',' << field(train, true) << ',' << field(train, false) << ','
              << field(test, true) << ',' << field(test, false) << ',' << code << '\n'
              << std::flush;
        };

        RunConfig base = cfg;
        base.network.baseline = true;
        base.out = (fs::path(cfg.out) / "baseline").string();
        run(base, "baseline", "");
        for (Index r : list) {
          RunConfig rc = cfg;
          rc.network.baseline = false;
          for (ConvLayerConfig& layer : rc.network.layers) layer.rank = r;
          rc.out = (fs::path(cfg.out) / ("R" + std::to_string(r))).string();
          run(rc, "cpac", std::to_string(r));
        }
        out << "wrote " << (fs::path(cfg.out) / "sweep.csv").string() << '\n';
        return status;
      },
      err);
}

}  // namespace cpac
