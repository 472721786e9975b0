#include "selftpt/encoders.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "selftpt/rng.hpp"

namespace selftpt {
namespace {

[[noreturn]] void fail(const std::string& where, const std::string& msg) {
  throw std::invalid_argument(where + ": " + msg);
}

std::vector<double> gaussian(std::mt19937_64& rng, std::size_t n, double stddev) {
  std::normal_distribution<double> d(0.0, stddev);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

DiffTensor sinusoidal_table(std::size_t max_len, std::size_t dim) {
  // Positions must stay distinguishable (mean-pooling is otherwise
  // order-blind), but at full strength the shared position signal drowns
  // token identity and squeezes all class embeddings into a narrow cone.
  constexpr double kPositionScale = 0.2;
  std::vector<double> v(max_len * dim);
  for (std::size_t t = 0; t < max_len; ++t) {
    for (std::size_t j = 0; j < dim; ++j) {
      const double rate = std::pow(10000.0, double(j - (j % 2)) / double(dim));
      const double angle = double(t) / rate;
      v[t * dim + j] = kPositionScale * ((j % 2 == 0) ? std::sin(angle) : std::cos(angle));
    }
  }
  return DiffTensor::matrix(max_len, dim, std::move(v));
}

}  // namespace

FrozenTextEncoder make_text_encoder(std::uint64_t seed, const EncoderDims& dims) {
  if (dims.vocab == 0 || dims.token_dim == 0 || dims.hidden_dim == 0 || dims.embed_dim == 0 ||
      dims.max_len == 0) {
    fail("make_text_encoder", "all dimensions must be positive");
  }
  FrozenTextEncoder enc;
  enc.dims = dims;
  {
    auto rng = substream(seed, "encoder-tokens");
    std::vector<double> table = gaussian(rng, dims.vocab * dims.token_dim, 1.0);
    // Ids 0-3 are reserved for the fixed template prefix every class name is
    // wrapped in. Like stopwords they carry no class information, so their
    // embeddings are drawn small; otherwise the shared prefix dominates the
    // pooled encoding and every class lands in one narrow cone.
    constexpr double kTemplateTokenScale = 0.25;
    const std::size_t reserved = std::min<std::size_t>(4, dims.vocab);
    for (std::size_t i = 0; i < reserved * dims.token_dim; ++i) table[i] *= kTemplateTokenScale;
    enc.token_table = DiffTensor::matrix(dims.vocab, dims.token_dim, std::move(table));
  }
  enc.position_table = sinusoidal_table(dims.max_len, dims.token_dim);
  {
    // Hidden-layer scale keeps pre-activations in tanh's curved region, so
    // sequences sharing most tokens still spread apart after pooling.
    auto rng = substream(seed, "encoder-hidden");
    enc.w_hidden = DiffTensor::matrix(
        dims.token_dim, dims.hidden_dim,
        gaussian(rng, dims.token_dim * dims.hidden_dim, std::sqrt(2.0 / double(dims.token_dim))));
    // Biases shift every position identically, so they only add a shared
    // component across sequences; keep them small.
    enc.b_hidden = DiffTensor::vector(gaussian(rng, dims.hidden_dim, 0.1));
  }
  {
    auto rng = substream(seed, "encoder-out");
    enc.w_out = DiffTensor::matrix(
        dims.hidden_dim, dims.embed_dim,
        gaussian(rng, dims.hidden_dim * dims.embed_dim, std::sqrt(1.0 / double(dims.hidden_dim))));
    enc.b_out = DiffTensor::vector(gaussian(rng, dims.embed_dim, 0.02));
  }
  return enc;
}

DiffTensor token_embedding_row(const FrozenTextEncoder& enc, int token_id) {
  if (token_id < 0 || std::size_t(token_id) >= enc.dims.vocab) {
    fail("token_embedding_row", "token id " + std::to_string(token_id) +
                                    " outside vocabulary of " + std::to_string(enc.dims.vocab));
  }
  const std::size_t id = std::size_t(token_id);
  return reshape(slice_rows(enc.token_table, id, id + 1), Shape{enc.dims.token_dim});
}

namespace {
std::size_t g_encode_calls = 0;
}  // namespace

std::size_t encoder_invocation_count() { return g_encode_calls; }

DiffTensor encode_rows(const FrozenTextEncoder& enc, std::span<const DiffTensor> rows) {
  const std::size_t len = rows.size();
  if (len == 0) fail("encode_rows", "empty sequence");
  ++g_encode_calls;
  if (len > enc.dims.max_len) {
    fail("encode_rows", "sequence of " + std::to_string(len) + " exceeds max length " +
                            std::to_string(enc.dims.max_len));
  }
  std::vector<DiffTensor> as_rows;
  as_rows.reserve(len);
  for (const DiffTensor& r : rows) {
    if (r.numel() != enc.dims.token_dim) {
      fail("encode_rows", "position vector of shape " + shape_str(r.shape()) +
                              " does not match token dim " + std::to_string(enc.dims.token_dim));
    }
    as_rows.push_back(r.rank() == 2 ? r : reshape(r, Shape{1, enc.dims.token_dim}));
  }
  DiffTensor stacked = concat_rows(as_rows);                             // len x d
  DiffTensor located = add(stacked, slice_rows(enc.position_table, 0, len));
  DiffTensor hidden = tanh(add(matmul(located, enc.w_hidden), broadcast_rows(enc.b_hidden, len)));
  DiffTensor pooled = scalar_mul(col_sums(hidden), 1.0 / double(len));   // {hidden_dim}
  DiffTensor out = matmul(reshape(pooled, Shape{1, enc.dims.hidden_dim}), enc.w_out);
  return add(reshape(out, Shape{enc.dims.embed_dim}), enc.b_out);
}

DiffTensor encode_token_ids(const FrozenTextEncoder& enc, std::span<const int> ids) {
  std::vector<DiffTensor> rows;
  rows.reserve(ids.size());
  for (int id : ids) rows.push_back(token_embedding_row(enc, id));
  return encode_rows(enc, rows);
}

DiffTensor encode_image(const DiffTensor& feature, std::size_t embed_dim) {
  if (!feature.defined() || feature.rank() != 1 || feature.numel() != embed_dim) {
    fail("encode_image", "expected a {" + std::to_string(embed_dim) + "} feature, got shape " +
                             (feature.defined() ? shape_str(feature.shape()) : "<none>"));
  }
  return feature;
}

ProjectionHead make_projection_head(std::uint64_t seed, std::size_t embed_dim,
                                    std::size_t proj_dim) {
  if (embed_dim == 0 || proj_dim == 0) fail("make_projection_head", "dimensions must be positive");
  auto rng = substream(seed, "projection-head");
  auto xavier = [&rng](std::size_t fan_in, std::size_t fan_out) {
    const double limit = std::sqrt(6.0 / double(fan_in + fan_out));
    std::uniform_real_distribution<double> d(-limit, limit);
    std::vector<double> v(fan_in * fan_out);
    for (double& x : v) x = d(rng);
    return v;
  };
  ProjectionHead head;
  head.w_in = DiffTensor::matrix(embed_dim, proj_dim, xavier(embed_dim, proj_dim));
  head.b_in = DiffTensor::zeros(Shape{proj_dim});
  head.w_out = DiffTensor::matrix(proj_dim, proj_dim, xavier(proj_dim, proj_dim));
  head.b_out = DiffTensor::zeros(Shape{proj_dim});
  return head;
}

DiffTensor project_rows(const ProjectionHead& head, const DiffTensor& w, bool normalize) {
  if (!w.defined() || w.rank() != 2 || w.cols() != head.embed_dim()) {
    fail("project", "expected rows of width " + std::to_string(head.embed_dim()) + ", got " +
                        (w.defined() ? shape_str(w.shape()) : "<none>"));
  }
  const std::size_t n = w.rows();
  DiffTensor hidden = relu(add(matmul(w, head.w_in), broadcast_rows(head.b_in, n)));
  DiffTensor z = add(matmul(hidden, head.w_out), broadcast_rows(head.b_out, n));
  if (!normalize) return z;
  auto zv = z.values();
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < z.cols(); ++j) sq += zv[i * z.cols() + j] * zv[i * z.cols() + j];
    if (sq == 0.0) {
      fail("project", "zero-norm projection output at row " + std::to_string(i) +
                          " cannot be normalized");
    }
  }
  return l2_normalize_rows(z);
}

DiffTensor project(const ProjectionHead& head, const DiffTensor& w, bool normalize) {
  if (!w.defined() || w.rank() != 1) {
    fail("project", "expected an embedding vector, got shape " +
                        (w.defined() ? shape_str(w.shape()) : "<none>"));
  }
  DiffTensor z = project_rows(head, reshape(w, Shape{1, w.numel()}), normalize);
  return reshape(z, Shape{head.proj_dim()});
}

}  // namespace selftpt
