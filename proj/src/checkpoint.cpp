#include "pnpslab/checkpoint.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace pnpslab {

std::string to_string(Encoder encoder) { return encoder == Encoder::Lstm ? "lstm" : "mean_pool"; }

Encoder parse_encoder(std::string_view text) {
  if (text == "lstm") return Encoder::Lstm;
  if (text == "mean_pool") return Encoder::MeanPool;
  throw ConfigError("unknown encoder '" + std::string(text) + "' (expected lstm or mean_pool)");
}

void ModelConfig::validate() const {
  if (vocab_size < 1 || embed_dim < 1 || hidden_dim < 1 || mlp_hidden < 1)
    throw ConfigError("model dimensions must all be >= 1");
  if (n_classes < 2) throw ConfigError("a classifier needs at least two classes");
  if (!(init_scale >= 0.0)) throw ConfigError("init_scale must be non-negative");
}

namespace {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

class LineReader {
public:
  explicit LineReader(std::istream& in) : in_(in) {}

  std::string next() {
    std::string line;
    if (!std::getline(in_, line)) throw ParseError("unexpected end of checkpoint", lineno_ + 1);
    ++lineno_;
    return line;
  }

  template <class T>
  T field(std::string_view key) {
    std::istringstream is(next());
    std::string k;
    T value{};
    if (!(is >> k >> value) || k != key) throw ParseError("expected '" + std::string(key) + " <value>'", lineno_);
    return value;
  }

  double number() {
    const std::string line = next();
    double v = 0.0;
    auto res = std::from_chars(line.data(), line.data() + line.size(), v);
    if (res.ec != std::errc() || res.ptr != line.data() + line.size())
      throw ParseError("malformed value '" + line + "'", lineno_);
    return v;
  }

  std::size_t line() const { return lineno_; }

private:
  std::istream& in_;
  std::size_t lineno_ = 0;
};

} // namespace

void save_checkpoint(const SequenceClassifier<double>& model, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write checkpoint " + path.string());
  const auto& c = model.config();
  out << "pnpslab-checkpoint 1\n"
      << "vocab_size " << c.vocab_size << "\n"
      << "embed_dim " << c.embed_dim << "\n"
      << "hidden_dim " << c.hidden_dim << "\n"
      << "mlp_hidden " << c.mlp_hidden << "\n"
      << "n_classes " << c.n_classes << "\n"
      << "init_scale " << format_double(c.init_scale) << "\n"
      << "seed " << c.seed << "\n"
      << "encoder " << to_string(c.encoder) << "\n"
      << "reverse_input " << (c.reverse_input ? 1 : 0) << "\n";
  const auto& p = model.params();
  auto write_block = [&out](const char* name, const auto& m) {
    out << "block " << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
    for (Eigen::Index k = 0; k < m.size(); ++k) out << format_double(m.data()[k]) << '\n';
  };
  write_block("embedding", p.embedding);
  write_block("cell_input", p.cell_input);
  write_block("cell_recurrent", p.cell_recurrent);
  write_block("cell_bias", p.cell_bias);
  write_block("mlp_weight", p.mlp_weight);
  write_block("mlp_bias", p.mlp_bias);
  write_block("head_weight", p.head_weight);
  write_block("head_bias", p.head_bias);
  out << "end\n";
}

SequenceClassifier<double> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open checkpoint " + path.string(), 0);
  LineReader r(in);
  if (r.next() != "pnpslab-checkpoint 1") throw ParseError("not a pnpslab checkpoint (version 1)", 1);
  ModelConfig c;
  c.vocab_size = r.field<int>("vocab_size");
  c.embed_dim = r.field<int>("embed_dim");
  c.hidden_dim = r.field<int>("hidden_dim");
  c.mlp_hidden = r.field<int>("mlp_hidden");
  c.n_classes = r.field<int>("n_classes");
  {
    std::istringstream is(r.next());
    std::string k, v;
    if (!(is >> k >> v) || k != "init_scale") throw ParseError("expected 'init_scale <value>'", r.line());
    auto res = std::from_chars(v.data(), v.data() + v.size(), c.init_scale);
    if (res.ec != std::errc()) throw ParseError("malformed init_scale", r.line());
  }
  c.seed = r.field<std::uint64_t>("seed");
  c.encoder = parse_encoder(r.field<std::string>("encoder"));
  c.reverse_input = r.field<int>("reverse_input") != 0;
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ParseError(e.what(), r.line());
  }

  auto params = Parameters<double>::zeros(c);
  auto read_block = [&r](const char* name, auto& m) {
    std::istringstream is(r.next());
    std::string tag, got;
    Eigen::Index rows = -1, cols = -1;
    if (!(is >> tag >> got >> rows >> cols) || tag != "block" || got != name)
      throw ParseError(std::string("expected block '") + name + "'", r.line());
    if (rows != m.rows() || cols != m.cols())
      throw ParseError(std::string("block '") + name + "' has the wrong shape", r.line());
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = r.number();
  };
  read_block("embedding", params.embedding);
  read_block("cell_input", params.cell_input);
  read_block("cell_recurrent", params.cell_recurrent);
  read_block("cell_bias", params.cell_bias);
  read_block("mlp_weight", params.mlp_weight);
  read_block("mlp_bias", params.mlp_bias);
  read_block("head_weight", params.head_weight);
  read_block("head_bias", params.head_bias);
  if (r.next() != "end") throw ParseError("missing 'end' marker", r.line());
  return SequenceClassifier<double>(c, std::move(params));
}

} // namespace pnpslab
