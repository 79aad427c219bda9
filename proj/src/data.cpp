#include "mbrl/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

namespace mbrl {

std::string to_string(OutcomeKind kind) {
  return kind == OutcomeKind::kBinary ? "binary" : "continuous";
}

OutcomeKind outcome_kind_from_string(const std::string& name) {
  if (name == "continuous") return OutcomeKind::kContinuous;
  if (name == "binary") return OutcomeKind::kBinary;
  throw ValidationError("unknown outcome kind '" + name + "'");
}

Eigen::Index Dataset::treated_count() const {
  return static_cast<Eigen::Index>(std::llround(treatment.sum()));
}

void Dataset::validate() const {
  const Eigen::Index n = covariates.rows();
  if (n < 2) throw ValidationError("dataset needs at least 2 rows");
  if (covariates.cols() < 1) throw ValidationError("dataset needs at least one covariate");
  if (treatment.size() != n || outcome.size() != n)
    throw ValidationError("treatment/outcome length differs from covariate rows");
  if (!covariates.allFinite()) throw ValidationError("non-finite covariate value");
  if (!outcome.allFinite()) throw ValidationError("non-finite outcome value");
  for (Eigen::Index i = 0; i < n; ++i) {
    if (treatment[i] != 0.0 && treatment[i] != 1.0)
      throw ValidationError("treatment not binary at row " + std::to_string(i));
    if (outcome_kind == OutcomeKind::kBinary && outcome[i] != 0.0 && outcome[i] != 1.0)
      throw ValidationError("binary outcome not in {0,1} at row " + std::to_string(i));
  }
  const Eigen::Index treated = treated_count();
  if (treated == 0 || treated == n)
    throw ValidationError("dataset needs at least one treated and one control unit");
  if (y0.has_value() != y1.has_value())
    throw ValidationError("y0 and y1 must be given together");
  if (mu0.has_value() != mu1.has_value())
    throw ValidationError("mu0 and mu1 must be given together");
  for (const auto* v : {&y0, &y1, &mu0, &mu1}) {
    if (!v->has_value()) continue;
    if ((*v)->size() != n) throw ValidationError("ground-truth column length mismatch");
    if (!(*v)->allFinite()) throw ValidationError("non-finite ground-truth value");
  }
  if (has_potential_outcomes()) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const double expected = treatment[i] == 1.0 ? (*y1)[i] : (*y0)[i];
      if (std::abs(expected - outcome[i]) > 1e-9 * std::max(1.0, std::abs(expected)))
        throw ValidationError("consistency violation at row " + std::to_string(i) +
                              ": factual outcome differs from potential outcome");
    }
  }
}

Dataset subset(const Dataset& data, const std::vector<Eigen::Index>& indices) {
  Dataset out;
  const auto n = static_cast<Eigen::Index>(indices.size());
  out.outcome_kind = data.outcome_kind;
  out.covariates.resize(n, data.dim());
  out.treatment.resize(n);
  out.outcome.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    out.covariates.row(i) = data.covariates.row(indices[i]);
    out.treatment[i] = data.treatment[indices[i]];
    out.outcome[i] = data.outcome[indices[i]];
  }
  auto take = [&](const std::optional<Vector>& src) -> std::optional<Vector> {
    if (!src) return std::nullopt;
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = (*src)[indices[i]];
    return v;
  };
  out.y0 = take(data.y0);
  out.y1 = take(data.y1);
  out.mu0 = take(data.mu0);
  out.mu1 = take(data.mu1);
  return out;
}

Dataset concat(const Dataset& a, const Dataset& b) {
  if (a.dim() != b.dim() || a.outcome_kind != b.outcome_kind)
    throw ValidationError("cannot concatenate datasets of different shape or outcome kind");
  Dataset out;
  out.outcome_kind = a.outcome_kind;
  out.covariates.resize(a.size() + b.size(), a.dim());
  out.covariates << a.covariates, b.covariates;
  auto stack = [](const Vector& x, const Vector& y) {
    Vector v(x.size() + y.size());
    v << x, y;
    return v;
  };
  out.treatment = stack(a.treatment, b.treatment);
  out.outcome = stack(a.outcome, b.outcome);
  auto stack_opt = [&](const std::optional<Vector>& x,
                       const std::optional<Vector>& y) -> std::optional<Vector> {
    if (!x || !y) return std::nullopt;
    return stack(*x, *y);
  };
  out.y0 = stack_opt(a.y0, b.y0);
  out.y1 = stack_opt(a.y1, b.y1);
  out.mu0 = stack_opt(a.mu0, b.mu0);
  out.mu1 = stack_opt(a.mu1, b.mu1);
  return out;
}

// ---------------------------------------------------------------------------
// CSV

namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  for (auto& f : fields) {
    while (!f.empty() && (f.front() == ' ' || f.front() == '\t')) f.remove_prefix(1);
    while (!f.empty() && (f.back() == ' ' || f.back() == '\t' || f.back() == '\r'))
      f.remove_suffix(1);
  }
  return fields;
}

double parse_number(std::string_view field, std::size_t line_no, std::string_view column) {
  double value = 0.0;
  const char* first = field.data();
  const char* last = field.data() + field.size();
  if (first != last && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last || field.empty())
    throw ValidationError("line " + std::to_string(line_no) + ", column '" +
                          std::string(column) + "': cannot parse '" + std::string(field) + "'");
  if (!std::isfinite(value))
    throw ValidationError("line " + std::to_string(line_no) + ", column '" +
                          std::string(column) + "': non-finite value");
  return value;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  int column(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : static_cast<int>(it - header.begin());
  }
};

CsvTable read_table(const std::string& text) {
  CsvTable table;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view view(line);
    if (line_no == 1 && view.substr(0, 3) == "\xEF\xBB\xBF") view.remove_prefix(3);
    if (view.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    auto fields = split_fields(view);
    if (!have_header) {
      for (auto f : fields) table.header.emplace_back(f);
      have_header = true;
      continue;
    }
    if (fields.size() != table.header.size())
      throw ValidationError("line " + std::to_string(line_no) + ": expected " +
                            std::to_string(table.header.size()) + " fields, got " +
                            std::to_string(fields.size()));
    std::vector<double> row(fields.size());
    for (std::size_t c = 0; c < fields.size(); ++c)
      row[c] = parse_number(fields[c], line_no, table.header[c]);
    table.rows.push_back(std::move(row));
  }
  if (!have_header) throw ValidationError("empty CSV input");
  return table;
}

std::vector<int> covariate_columns(const CsvTable& table) {
  std::vector<int> cols;
  for (int j = 1;; ++j) {
    const int c = table.column("z" + std::to_string(j));
    if (c < 0) break;
    cols.push_back(c);
  }
  if (cols.empty()) throw ValidationError("missing mandatory column 'z1'");
  return cols;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void append_number(std::string& out, double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, ptr);
}

}  // namespace

Dataset parse_csv(const std::string& text, OutcomeKind kind) {
  const CsvTable table = read_table(text);
  const auto zcols = covariate_columns(table);
  const int dcol = table.column("d");
  const int ycol = table.column("y");
  if (dcol < 0) throw ValidationError("missing mandatory column 'd'");
  if (ycol < 0) throw ValidationError("missing mandatory column 'y'");
  const auto n = static_cast<Eigen::Index>(table.rows.size());

  Dataset data;
  data.outcome_kind = kind;
  data.covariates.resize(n, static_cast<Eigen::Index>(zcols.size()));
  data.treatment.resize(n);
  data.outcome.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& row = table.rows[static_cast<std::size_t>(i)];
    for (std::size_t j = 0; j < zcols.size(); ++j)
      data.covariates(i, static_cast<Eigen::Index>(j)) = row[zcols[j]];
    data.treatment[i] = row[dcol];
    data.outcome[i] = row[ycol];
  }
  auto optional_column = [&](const char* name) -> std::optional<Vector> {
    const int c = table.column(name);
    if (c < 0) return std::nullopt;
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = table.rows[static_cast<std::size_t>(i)][c];
    return v;
  };
  data.y0 = optional_column("y0");
  data.y1 = optional_column("y1");
  data.mu0 = optional_column("mu0");
  data.mu1 = optional_column("mu1");
  data.validate();
  return data;
}

Dataset load_csv(const std::string& path, OutcomeKind kind) {
  try {
    return parse_csv(read_file(path), kind);
  } catch (const ValidationError& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

TwinsSource parse_twins_csv(const std::string& text) {
  const CsvTable table = read_table(text);
  const auto zcols = covariate_columns(table);
  const int c0 = table.column("y0");
  const int c1 = table.column("y1");
  if (c0 < 0 || c1 < 0) throw ValidationError("twins file needs columns 'y0' and 'y1'");
  const auto n = static_cast<Eigen::Index>(table.rows.size());
  if (n < 2) throw ValidationError("twins file needs at least 2 rows");
  TwinsSource src;
  src.covariates.resize(n, static_cast<Eigen::Index>(zcols.size()));
  src.y0.resize(n);
  src.y1.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& row = table.rows[static_cast<std::size_t>(i)];
    for (std::size_t j = 0; j < zcols.size(); ++j)
      src.covariates(i, static_cast<Eigen::Index>(j)) = row[zcols[j]];
    src.y0[i] = row[c0];
    src.y1[i] = row[c1];
  }
  return src;
}

TwinsSource load_twins_csv(const std::string& path) {
  try {
    return parse_twins_csv(read_file(path));
  } catch (const ValidationError& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

std::string format_csv(const Dataset& data) {
  std::string out;
  for (Eigen::Index j = 0; j < data.dim(); ++j) out += "z" + std::to_string(j + 1) + ",";
  out += "d,y";
  const bool pot = data.has_potential_outcomes();
  const bool means = data.has_noiseless_means();
  if (pot) out += ",y0,y1";
  if (means) out += ",mu0,mu1";
  out += '\n';
  for (Eigen::Index i = 0; i < data.size(); ++i) {
    for (Eigen::Index j = 0; j < data.dim(); ++j) {
      append_number(out, data.covariates(i, j));
      out += ',';
    }
    append_number(out, data.treatment[i]);
    out += ',';
    append_number(out, data.outcome[i]);
    if (pot) {
      out += ',';
      append_number(out, (*data.y0)[i]);
      out += ',';
      append_number(out, (*data.y1)[i]);
    }
    if (means) {
      out += ',';
      append_number(out, (*data.mu0)[i]);
      out += ',';
      append_number(out, (*data.mu1)[i]);
    }
    out += '\n';
  }
  return out;
}

void write_csv(const Dataset& data, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure("cannot write '" + path + "'");
  out << format_csv(data);
  if (!out) throw RuntimeFailure("write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// Splitting

void SplitSpec::validate() const {
  for (double f : {train_frac, val_frac, test_frac})
    if (!(f > 0.0) || !std::isfinite(f)) throw ValidationError("split fractions must be > 0");
  if (std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-12)
    throw ValidationError("split fractions must sum to 1");
}

SplitIndices split_indices(Eigen::Index n, const SplitSpec& spec) {
  spec.validate();
  // The 1e-9 guard keeps shares like 100 * 0.29 = 28.999999999999996 at 29.
  const auto share = [n](double f) {
    return static_cast<Eigen::Index>(std::floor(static_cast<double>(n) * f + 1e-9));
  };
  const Eigen::Index n_val = share(spec.val_frac);
  const Eigen::Index n_test = share(spec.test_frac);
  const Eigen::Index n_train = n - n_val - n_test;
  if (n_val < 1 || n_test < 1 || n_train < 1)
    throw ValidationError("split fraction too small: a split would be empty for N=" +
                          std::to_string(n));

  std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Eigen::Index{0});
  std::mt19937_64 rng(spec.seed);
  std::shuffle(perm.begin(), perm.end(), rng);

  SplitIndices out;
  auto it = perm.begin();
  out.train.assign(it, it + n_train);
  it += n_train;
  out.val.assign(it, it + n_val);
  it += n_val;
  out.test.assign(it, perm.end());
  return out;
}

DataSplit split(const Dataset& data, const SplitSpec& spec) {
  DataSplit out;
  out.indices = split_indices(data.size(), spec);
  out.train = subset(data, out.indices.train);
  out.val = subset(data, out.indices.val);
  out.test = subset(data, out.indices.test);
  return out;
}

// ---------------------------------------------------------------------------
// Ground truth

double TrueModel::g0(int d, const Eigen::Ref<const Eigen::RowVectorXd>& z) const {
  if (!outcome) throw ValidationError("true outcome model unavailable");
  return d == 1 ? z.dot(outcome->w_treated.transpose()) : z.dot(outcome->w_control.transpose());
}

double TrueModel::m0(const Eigen::Ref<const Eigen::RowVectorXd>& z) const {
  return sigmoid(z.dot(propensity_weights.transpose()) + propensity_intercept);
}

Vector TrueModel::g0(int d, const Matrix& z) const {
  if (!outcome) throw ValidationError("true outcome model unavailable");
  return z * (d == 1 ? outcome->w_treated : outcome->w_control);
}

Vector TrueModel::m0(const Matrix& z) const {
  const Vector logits = (z * propensity_weights).array() + propensity_intercept;
  return logits.unaryExpr([](double x) { return sigmoid(x); });
}

// ---------------------------------------------------------------------------
// Simulator

void SimConfig::validate() const {
  if (n_treated < 1 || n_control < 1) throw ValidationError("group sizes must be >= 1");
  if (dim < 1) throw ValidationError("dim must be >= 1");
  if (!(sigma_scale > 0.0)) throw ValidationError("sigma_scale must be > 0");
  if (mu1.size() != 0 && mu1.size() != dim) throw ValidationError("mu1 length != dim");
  if (mu0.size() != 0 && mu0.size() != dim) throw ValidationError("mu0 length != dim");
}

Vector SimConfig::mu1_or_zero() const { return mu1.size() ? mu1 : Vector::Zero(dim); }
Vector SimConfig::mu0_or_zero() const { return mu0.size() ? mu0 : Vector::Zero(dim); }

SimStructure draw_sim_structure(const SimConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(derive_seed(seed, 0x5157));
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  const int s = cfg.dim;
  Matrix mixing(s, s);
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < s; ++j) mixing(i, j) = unif(rng);
  SimStructure out;
  out.covariance = cfg.sigma_scale * mixing * mixing.transpose();
  out.w_treated.resize(s);
  out.w_control.resize(s);
  for (int j = 0; j < s; ++j) out.w_treated[j] = unif(rng);
  for (int j = 0; j < s; ++j) out.w_control[j] = unif(rng);
  return out;
}

Simulation generate_simulation(const SimConfig& cfg, std::uint64_t seed) {
  return generate_simulation(cfg, draw_sim_structure(cfg, seed), seed);
}

Simulation generate_simulation(const SimConfig& cfg, const SimStructure& structure,
                               std::uint64_t seed) {
  cfg.validate();
  const int s = cfg.dim;
  const Vector mu1 = cfg.mu1_or_zero();
  const Vector mu0 = cfg.mu0_or_zero();
  const Eigen::LLT<Matrix> llt(structure.covariance);
  if (llt.info() != Eigen::Success) throw ValidationError("simulator covariance not SPD");
  const Matrix chol = llt.matrixL();

  const Eigen::Index n = cfg.n_treated + cfg.n_control;
  std::mt19937_64 rng(derive_seed(seed, 0xDA7A));
  std::normal_distribution<double> normal(0.0, 1.0);
  // N(0, 0.1) read as variance 0.1.
  const double noise_sd = std::sqrt(0.1);

  Simulation sim;
  sim.structure = structure;
  Dataset& data = sim.data;
  data.outcome_kind = OutcomeKind::kContinuous;
  data.covariates.resize(n, s);
  data.treatment.resize(n);
  data.outcome.resize(n);
  Vector y0(n), y1(n), m0v(n), m1v(n);
  Vector draw(s);
  for (Eigen::Index i = 0; i < n; ++i) {
    const bool treated = i < cfg.n_treated;
    for (int j = 0; j < s; ++j) draw[j] = normal(rng);
    const Vector z = (treated ? mu1 : mu0) + chol * draw;
    data.covariates.row(i) = z.transpose();
    data.treatment[i] = treated ? 1.0 : 0.0;
    m1v[i] = structure.w_treated.dot(z);
    m0v[i] = structure.w_control.dot(z);
    y1[i] = m1v[i] + noise_sd * normal(rng);
    y0[i] = m0v[i] + noise_sd * normal(rng);
    data.outcome[i] = treated ? y1[i] : y0[i];
  }
  data.y0 = std::move(y0);
  data.y1 = std::move(y1);
  data.mu0 = std::move(m0v);
  data.mu1 = std::move(m1v);

  // Group-membership posterior: with equal covariances the log-odds are
  // linear in z.
  const Matrix prec = llt.solve(Matrix::Identity(s, s));
  const double p1 = static_cast<double>(cfg.n_treated) / static_cast<double>(n);
  TrueModel& truth = sim.truth;
  truth.outcome = TrueModel::LinearOutcome{structure.w_treated, structure.w_control};
  truth.propensity_weights = prec * (mu1 - mu0);
  truth.propensity_intercept = std::log(p1 / (1.0 - p1)) -
                               0.5 * (mu1.dot(prec * mu1) - mu0.dot(prec * mu0));
  truth.noise_sd_outcome = noise_sd;
  return sim;
}

TwinsAssignment generate_twins_assignment(const Matrix& covariates, std::uint64_t seed,
                                          TwinsAssignmentOptions options) {
  const Eigen::Index s = covariates.cols();
  std::mt19937_64 rng(derive_seed(seed, 0x7715));
  std::uniform_real_distribution<double> unif(-0.01, 0.01);
  // N(0, 0.01) read as variance 0.01.
  std::normal_distribution<double> normal(0.0, 0.1);
  TwinsAssignment out;
  out.truth.propensity_weights.resize(s);
  for (Eigen::Index j = 0; j < s; ++j) out.truth.propensity_weights[j] = unif(rng);
  out.truth.propensity_intercept = normal(rng);
  if (options.zero_coefficients) {
    out.truth.propensity_weights.setZero();
    out.truth.propensity_intercept = 0.0;
  }
  const Vector p = out.truth.m0(covariates);
  out.treatment.resize(covariates.rows());
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (Eigen::Index i = 0; i < covariates.rows(); ++i)
    out.treatment[i] = u01(rng) < p[i] ? 1.0 : 0.0;
  return out;
}

Dataset make_twins_dataset(const Matrix& covariates, const Vector& y0, const Vector& y1,
                           const TwinsAssignment& assignment) {
  Dataset data;
  data.outcome_kind = OutcomeKind::kBinary;
  data.covariates = covariates;
  data.treatment = assignment.treatment;
  data.outcome = (assignment.treatment.array() == 1.0).select(y1, y0);
  data.y0 = y0;
  data.y1 = y1;
  data.validate();
  return data;
}

double kl_selection_bias(const Vector& mu1, const Vector& mu0, const Matrix& cov) {
  if (mu1.size() != mu0.size() || cov.rows() != mu1.size() || cov.cols() != mu1.size())
    throw ValidationError("kl_selection_bias: dimension mismatch");
  const Eigen::LLT<Matrix> llt(cov);
  if (llt.info() != Eigen::Success) throw ValidationError("singular covariance");
  const Vector delta = mu1 - mu0;
  return 0.5 * delta.dot(llt.solve(delta));
}

Vector mu1_for_kl(const Vector& mu0, const Vector& direction, const Matrix& cov,
                  double target_kl) {
  if (!(target_kl >= 0.0)) throw ValidationError("target KL must be >= 0");
  if (target_kl == 0.0) return mu0;
  const double unit_kl = kl_selection_bias(mu0 + direction, mu0, cov);
  if (!(unit_kl > 0.0)) throw ValidationError("KL direction must be nonzero");
  return mu0 + std::sqrt(target_kl / unit_kl) * direction;
}

OverlapReport check_overlap(const Vector& propensities, double eps) {
  if (!(eps > 0.0 && eps < 0.5)) throw ValidationError("invalid eps");
  OverlapReport report;
  report.eps = eps;
  for (Eigen::Index i = 0; i < propensities.size(); ++i) {
    const double p = propensities[i];
    if (!(p >= eps && p <= 1.0 - eps)) report.violations.push_back(i);
  }
  report.passed = report.violations.empty();
  return report;
}

double true_ate(const Dataset& data) {
  if (data.size() == 0) throw ValidationError("empty dataset");
  if (data.has_noiseless_means()) return (*data.mu1 - *data.mu0).mean();
  if (data.has_potential_outcomes()) return (*data.y1 - *data.y0).mean();
  throw ValidationError("ground truth unavailable");
}

}  // namespace mbrl
