#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "skeleguide/autograd.hpp"
#include "skeleguide/errors.hpp"
#include "skeleguide/latent.hpp"
#include "skeleguide/rng.hpp"
#include "skeleguide/synthworld.hpp"

namespace skeleguide {

struct ModelConfig {
  int d_model = 128;
  int n_heads = 4;
  int n_blocks = 4;
  int lora_rank = 4;
  double lora_scale = 1.0;
  int text_vocab_size = vocab::size;
  int max_text_len = kPromptLength;
  int image_size = 64;
  int patch = 8;
  int cond_patch_dim = 192;
  int noise_patch_dim = 192;  // doubled for the implicit baseline
  std::uint64_t seed = 0;

  int head_dim() const { return d_model / n_heads; }
  int grid() const { return image_size / patch; }
  int grid_tokens() const { return grid() * grid(); }

  void validate() const {
    if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0)
      throw ConfigError("d_model must be a positive multiple of n_heads");
    if (n_blocks < 1) throw ConfigError("n_blocks must be >= 1");
    if (lora_rank < 1) throw ConfigError("lora_rank must be >= 1");
    if (!std::isfinite(lora_scale)) throw ConfigError("lora_scale must be finite");
    if (text_vocab_size < 1 || max_text_len < 1) throw ConfigError("text vocabulary and length must be positive");
    if (patch <= 0 || image_size <= 0 || image_size % patch != 0) throw ConfigError("image_size must be a multiple of patch");
    if (cond_patch_dim != 3 * patch * patch) throw ConfigError("cond_patch_dim must equal 3 * patch^2");
    if (noise_patch_dim <= 0 || noise_patch_dim % (3 * patch * patch) != 0)
      throw ConfigError("noise_patch_dim must be a multiple of 3 * patch^2");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::ordered_json{{"d_model", c.d_model},
                             {"n_heads", c.n_heads},
                             {"n_blocks", c.n_blocks},
                             {"lora_rank", c.lora_rank},
                             {"lora_scale", c.lora_scale},
                             {"text_vocab_size", c.text_vocab_size},
                             {"max_text_len", c.max_text_len},
                             {"image_size", c.image_size},
                             {"patch", c.patch},
                             {"cond_patch_dim", c.cond_patch_dim},
                             {"noise_patch_dim", c.noise_patch_dim},
                             {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("d_model").get_to(c.d_model);
  j.at("n_heads").get_to(c.n_heads);
  j.at("n_blocks").get_to(c.n_blocks);
  j.at("lora_rank").get_to(c.lora_rank);
  j.at("lora_scale").get_to(c.lora_scale);
  j.at("text_vocab_size").get_to(c.text_vocab_size);
  j.at("max_text_len").get_to(c.max_text_len);
  j.at("image_size").get_to(c.image_size);
  j.at("patch").get_to(c.patch);
  j.at("cond_patch_dim").get_to(c.cond_patch_dim);
  j.at("noise_patch_dim").get_to(c.noise_patch_dim);
  j.at("seed").get_to(c.seed);
}

enum class Branch { text, condition, noise };
enum class Adapter { none, skeletal, appearance };
enum class Proj { q, k, v };

inline std::string_view to_string(Branch b) {
  return b == Branch::text ? "text" : b == Branch::condition ? "cond" : "noise";
}
inline std::string_view to_string(Adapter a) {
  return a == Adapter::none ? "none" : a == Adapter::skeletal ? "skeletal" : "appearance";
}
inline std::string_view to_string(Proj p) { return p == Proj::q ? "q" : p == Proj::k ? "k" : "v"; }

inline Adapter parse_adapter(std::string_view name) {
  if (name == "skeletal") return Adapter::skeletal;
  if (name == "appearance") return Adapter::appearance;
  if (name == "none") return Adapter::none;
  throw ConfigError("unknown adapter '" + std::string(name) + "'");
}

inline constexpr std::array<Branch, 3> kBranches{Branch::text, Branch::condition, Branch::noise};

/// Per-branch token states of a batch of `groups` sequences laid out as
/// [text | condition | noise]. Each branch holds groups * n rows.
template <class T>
struct TokenSequence {
  int groups = 1;
  std::array<ag::Var<T>, 3> x;               // indexed by Branch; empty Var = branch absent
  std::array<std::vector<int>, 3> position;  // per-row position index

  ag::Var<T>& operator[](Branch b) { return x[static_cast<std::size_t>(b)]; }
  const ag::Var<T>& operator[](Branch b) const { return x[static_cast<std::size_t>(b)]; }
  bool has(Branch b) const { return static_cast<bool>((*this)[b]) && (*this)[b].rows() > 0; }
  Eigen::Index per_group(Branch b) const { return has(b) ? (*this)[b].rows() / groups : 0; }
};

/// Named intermediate values captured during a forward pass.
template <class T>
using Trace = std::map<std::string, ag::Mat<T>>;

/// Multi-branch diffusion transformer with condition-branch LoRA adapters.
template <class T>
class Backbone {
 public:
  using Var = ag::Var<T>;
  using Mat = ag::Mat<T>;

  explicit Backbone(const ModelConfig& config) : config_(config) {
    config_.validate();
    init();
  }

  const ModelConfig& config() const { return config_; }

  const std::map<std::string, Var>& params() const { return params_; }
  Var& param(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Var& param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : params_) n += static_cast<std::size_t>(v.value().size());
    return n;
  }

  static bool is_adapter_param(const std::string& name, Adapter a) {
    const std::string prefix = "lora/" + std::string(to_string(a)) + "/";
    return name.compare(0, prefix.size(), prefix) == 0;
  }
  static bool is_backbone_param(const std::string& name) { return name.compare(0, 5, "lora/") != 0; }

  /// Names of the parameters belonging to one adapter set.
  std::vector<std::string> adapter_params(Adapter a) const {
    if (a == Adapter::none) throw ConfigError("adapter 'none' has no parameters");
    std::vector<std::string> out;
    for (const auto& [name, _] : params_)
      if (is_adapter_param(name, a)) out.push_back(name);
    return out;
  }
  std::vector<std::string> adapter_params(std::string_view name) const { return adapter_params(parse_adapter(name)); }

  std::vector<std::string> backbone_params() const {
    std::vector<std::string> out;
    for (const auto& [name, _] : params_)
      if (is_backbone_param(name)) out.push_back(name);
    return out;
  }

  void set_active_adapter(Adapter a) { active_ = a; }
  void set_active_adapter(std::string_view name) {
    const Adapter a = parse_adapter(name);
    if (a == Adapter::none) throw ConfigError("active adapter must be skeletal or appearance");
    active_ = a;
  }
  Adapter active_adapter() const { return active_; }

  /// Marks exactly the named parameters as trainable.
  void set_trainable(const std::vector<std::string>& names) {
    for (auto& [_, v] : params_) v.set_requires_grad(false);
    for (const auto& n : names) param(n).set_requires_grad(true);
  }
  void zero_grad() {
    for (auto& [_, v] : params_) v.zero_grad();
  }

  static std::string lora_name(Adapter a, int block, Proj p, char factor) {
    return "lora/" + std::string(to_string(a)) + "/blk" + std::to_string(block) + "/" + std::string(to_string(p)) +
           "/" + factor;
  }
  static std::string block_name(int block, Branch b, const std::string& what) {
    return "blk" + std::to_string(block) + "/" + std::string(to_string(b)) + "/" + what;
  }

  /// Base projection plus, on the condition branch, scale * B (A z).
  Var lora_project(const Var& z, Proj p, int block, Branch branch, Adapter adapter) const {
    if (adapter != Adapter::none && branch != Branch::condition)
      throw ContractViolation("adapter path applied to " + std::string(to_string(branch)) + " tokens");
    const std::string w = std::string(to_string(p));
    Var out = ag::linear(z, param(block_name(block, branch, w + "_w")), param(block_name(block, branch, w + "_b")));
    if (adapter == Adapter::none) return out;
    const Var& a = param(lora_name(adapter, block, p, 'A'));
    const Var& b = param(lora_name(adapter, block, p, 'B'));
    Var low = ag::matmul_nt(ag::matmul_nt(z, a), b);
    if (config_.lora_scale != 1.0) low = ag::scale(low, static_cast<T>(config_.lora_scale));
    return ag::add(out, low);
  }

  /// Softmax attention over the concatenated sequence. Input tokens are the
  /// normalized block inputs; output is the per-branch attention result before
  /// the output projection.
  TokenSequence<T> joint_attention(const TokenSequence<T>& seq, int block, Adapter adapter, Trace<T>* trace = nullptr,
                                   Mat* probs = nullptr) const {
    std::vector<Var> qs, ks, vs;
    std::vector<Branch> present;
    for (Branch b : kBranches) {
      if (!seq.has(b)) continue;
      present.push_back(b);
      const Adapter ad = b == Branch::condition ? adapter : Adapter::none;
      qs.push_back(lora_project(seq[b], Proj::q, block, b, ad));
      ks.push_back(lora_project(seq[b], Proj::k, block, b, ad));
      vs.push_back(lora_project(seq[b], Proj::v, block, b, ad));
      if (trace) {
        (*trace)[block_name(block, b, "q")] = qs.back().value();
        (*trace)[block_name(block, b, "k")] = ks.back().value();
        (*trace)[block_name(block, b, "v")] = vs.back().value();
      }
    }
    if (present.empty()) throw ShapeError("joint_attention on an empty sequence");
    const int g = seq.groups;
    const Var out = ag::attention(ag::concat_groups(qs, g), ag::concat_groups(ks, g), ag::concat_groups(vs, g), g,
                                  config_.n_heads, probs);
    TokenSequence<T> res;
    res.groups = g;
    res.position = seq.position;
    Eigen::Index offset = 0;
    for (Branch b : present) {
      const Eigen::Index n = seq.per_group(b);
      res[b] = present.size() == 1 ? out : ag::slice_groups(out, g, offset, n);
      offset += n;
    }
    return res;
  }

  /// Embeds raw inputs into branch token states. noisy is [groups*N x noise_patch_dim],
  /// cond is [groups*N x cond_patch_dim] or empty, text holds groups*max_text_len ids.
  TokenSequence<T> embed(const Var& noisy, const Var& cond, const std::vector<int>& text, int groups,
                         const std::vector<int>* cond_positions = nullptr) const {
    if (groups < 1) throw ShapeError("batch must hold at least one sample");
    const int n = config_.grid_tokens();
    if (noisy.cols() != config_.noise_patch_dim || noisy.rows() != static_cast<Eigen::Index>(groups) * n)
      throw ShapeError("noisy latent is " + std::to_string(noisy.rows()) + "x" + std::to_string(noisy.cols()) +
                       ", expected " + std::to_string(groups * n) + "x" + std::to_string(config_.noise_patch_dim));
    if (text.size() != static_cast<std::size_t>(groups) * config_.max_text_len)
      throw ShapeError("text must hold " + std::to_string(config_.max_text_len) + " ids per sample");
    for (int id : text)
      if (id < 0 || id >= config_.text_vocab_size) throw ShapeError("text id " + std::to_string(id) + " out of vocabulary");

    TokenSequence<T> seq;
    seq.groups = groups;
    auto& tp = seq.position[static_cast<std::size_t>(Branch::text)];
    for (int g = 0; g < groups; ++g)
      for (int i = 0; i < config_.max_text_len; ++i) tp.push_back(i);
    seq[Branch::text] = ag::add(ag::gather_rows(param("text/embed"), text), ag::gather_rows(param("text/pos"), tp));

    auto& np = seq.position[static_cast<std::size_t>(Branch::noise)];
    for (int g = 0; g < groups; ++g)
      for (int i = 0; i < n; ++i) np.push_back(i);
    seq[Branch::noise] = ag::add(ag::linear(noisy, param("noise/in_w"), param("noise/in_b")),
                                 ag::gather_rows(param("grid/pos"), np));

    if (cond && cond.rows() > 0) {
      if (cond.cols() != config_.cond_patch_dim || cond.rows() != static_cast<Eigen::Index>(groups) * n)
        throw ShapeError("condition latent is " + std::to_string(cond.rows()) + "x" + std::to_string(cond.cols()) +
                         ", expected " + std::to_string(groups * n) + "x" + std::to_string(config_.cond_patch_dim));
      auto& cp = seq.position[static_cast<std::size_t>(Branch::condition)];
      if (cond_positions) {
        if (cond_positions->size() != static_cast<std::size_t>(cond.rows())) throw ShapeError("condition positions size");
        cp = *cond_positions;
      } else {
        for (int g = 0; g < groups; ++g)
          for (int i = 0; i < n; ++i) cp.push_back(i);
      }
      seq[Branch::condition] = ag::add(ag::linear(cond, param("cond/in_w"), param("cond/in_b")),
                                       ag::gather_rows(param("grid/pos"), cp));
    }
    return seq;
  }

  /// Sinusoidal timestep features followed by a two-layer MLP; [groups x d_model].
  Var time_embedding(const std::vector<T>& t) const {
    const int d = config_.d_model, half = d / 2;
    Mat f = Mat::Zero(static_cast<Eigen::Index>(t.size()), d);
    for (std::size_t g = 0; g < t.size(); ++g) {
      if (!std::isfinite(static_cast<double>(t[g]))) throw ShapeError("timestep must be finite");
      for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        const double arg = 1000.0 * static_cast<double>(t[g]) * freq;
        f(static_cast<Eigen::Index>(g), i) = static_cast<T>(std::cos(arg));
        f(static_cast<Eigen::Index>(g), half + i) = static_cast<T>(std::sin(arg));
      }
    }
    Var h = ag::silu(ag::linear(ag::constant<T>(std::move(f)), param("time/w1"), param("time/b1")));
    return ag::linear(h, param("time/w2"), param("time/b2"));
  }

  TokenSequence<T> block(const TokenSequence<T>& seq, const Var& c_act, int b, Adapter adapter,
                         Trace<T>* trace = nullptr) const {
    const int g = seq.groups, d = config_.d_model;
    const bool last = b == config_.n_blocks - 1;
    std::array<std::array<Var, 6>, 3> mod;
    TokenSequence<T> normed;
    normed.groups = g;
    normed.position = seq.position;
    for (Branch br : kBranches) {
      if (!seq.has(br)) continue;
      const Var m = ag::linear(c_act, param(block_name(b, br, "ada_w")), param(block_name(b, br, "ada_b")));
      auto& mb = mod[static_cast<std::size_t>(br)];
      for (int k = 0; k < 6; ++k) mb[static_cast<std::size_t>(k)] = ag::col_slice(m, k * d, d);
      normed[br] = ag::modulate(ag::layer_norm(seq[br]), mb[0], mb[1], g);
    }
    const TokenSequence<T> att = joint_attention(normed, b, adapter, trace);
    TokenSequence<T> out;
    out.groups = g;
    out.position = seq.position;
    for (Branch br : kBranches) {
      if (!seq.has(br)) continue;
      // only the noise stream feeds the output head after the final block
      if (last && br != Branch::noise) continue;
      const auto& mb = mod[static_cast<std::size_t>(br)];
      const Var o = ag::linear(att[br], param(block_name(b, br, "o_w")), param(block_name(b, br, "o_b")));
      Var x = ag::gated_residual(seq[br], mb[2], o, g);
      const Var h = ag::modulate(ag::layer_norm(x), mb[3], mb[4], g);
      const Var f = ag::linear(ag::gelu(ag::linear(h, param(block_name(b, br, "ff1_w")), param(block_name(b, br, "ff1_b")))),
                               param(block_name(b, br, "ff2_w")), param(block_name(b, br, "ff2_b")));
      out[br] = ag::gated_residual(x, mb[5], f, g);
      if (trace) (*trace)[block_name(b, br, "out")] = out[br].value();
    }
    return out;
  }

  /// Velocity for a batch. Returns [groups*N x noise_patch_dim].
  Var forward(const Var& noisy, const std::vector<T>& t, const Var& cond, const std::vector<int>& text,
              Adapter adapter, Trace<T>* trace = nullptr, const std::vector<int>* cond_positions = nullptr) const {
    const int groups = static_cast<int>(t.size());
    TokenSequence<T> seq = embed(noisy, cond, text, groups, cond_positions);
    const Var c_act = ag::silu(time_embedding(t));
    for (int b = 0; b < config_.n_blocks; ++b) seq = block(seq, c_act, b, adapter, trace);
    const int d = config_.d_model;
    const Var m = ag::linear(c_act, param("final/ada_w"), param("final/ada_b"));
    const Var h = ag::modulate(ag::layer_norm(seq[Branch::noise]), ag::col_slice(m, 0, d), ag::col_slice(m, d, d), groups);
    return ag::linear(h, param("final/out_w"), param("final/out_b"));
  }

  Var forward(const Var& noisy, const std::vector<T>& t, const Var& cond, const std::vector<int>& text) const {
    return forward(noisy, t, cond, text, active_);
  }

  /// Single-sample convenience over latent grids; cond may be null.
  LatentGrid<T> forward_velocity(const LatentGrid<T>& noisy, T t, const LatentGrid<T>* cond,
                                 const std::vector<int>& text, std::optional<Adapter> adapter = std::nullopt) const {
    noisy.validate();
    if (noisy.height != config_.image_size || noisy.width != config_.image_size || noisy.patch != config_.patch)
      throw ShapeError("noisy latent dims do not match the model");
    ag::NoGradGuard guard;
    const int n = config_.grid_tokens();
    Var x = ag::constant<T>(Eigen::Map<const Mat>(noisy.tokens.data(), n, static_cast<Eigen::Index>(noisy.tokens.size()) / n));
    Var c;
    if (cond) {
      cond->validate();
      if (cond->height != noisy.height || cond->width != noisy.width || cond->patch != noisy.patch)
        throw ShapeError("condition latent dims do not match the noisy latent");
      c = ag::constant<T>(Eigen::Map<const Mat>(cond->tokens.data(), n, cond->dim()));
    }
    const Var v = forward(x, {t}, c, text, adapter.value_or(active_));
    LatentGrid<T> out = noisy;
    std::copy(v.value().data(), v.value().data() + v.value().size(), out.tokens.begin());
    return out;
  }

  /// Deep copy; plain copies share parameter storage.
  Backbone clone() const { return cast<T>(); }

  /// Copy with every parameter converted to another scalar type.
  template <class U>
  Backbone<U> cast() const {
    Backbone<U> out(config_);
    for (const auto& [name, v] : params_) out.param(name).mutable_value() = v.value().template cast<U>();
    out.set_active_adapter(active_);
    return out;
  }

 private:
  void add_param(const std::string& name, Mat value) {
    params_.emplace(name, ag::leaf<T>(std::move(value), false));
  }

  static Mat xavier(Rng& rng, int out, int in) {
    const double a = std::sqrt(6.0 / (in + out));
    Mat m(out, in);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.uniform(-a, a));
    return m;
  }
  static Mat gaussian(Rng& rng, int rows, int cols, double std) {
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(std * rng.normal());
    return m;
  }

  void init() {
    const int d = config_.d_model, gs = config_.grid();
    Rng rng(Rng::derive(config_.seed, 0xB0B));
    add_param("text/embed", gaussian(rng, config_.text_vocab_size, d, 0.02));
    add_param("text/pos", gaussian(rng, config_.max_text_len, d, 0.02));
    add_param("cond/in_w", xavier(rng, d, config_.cond_patch_dim));
    add_param("cond/in_b", Mat::Zero(1, d));
    add_param("noise/in_w", xavier(rng, d, config_.noise_patch_dim));
    add_param("noise/in_b", Mat::Zero(1, d));
    // 2-D sin-cos table as the starting point of the learned grid positions
    Mat pos(gs * gs, d);
    const int quarter = d / 4;
    for (int y = 0; y < gs; ++y)
      for (int x = 0; x < gs; ++x)
        for (int i = 0; i < quarter; ++i) {
          const double w = std::exp(-std::log(10000.0) * i / quarter);
          pos(y * gs + x, i) = static_cast<T>(std::sin(x * w));
          pos(y * gs + x, quarter + i) = static_cast<T>(std::cos(x * w));
          pos(y * gs + x, 2 * quarter + i) = static_cast<T>(std::sin(y * w));
          pos(y * gs + x, 3 * quarter + i) = static_cast<T>(std::cos(y * w));
        }
    for (int c = 4 * quarter; c < d; ++c) pos.col(c).setZero();
    add_param("grid/pos", std::move(pos));
    add_param("time/w1", gaussian(rng, d, d, 0.02));
    add_param("time/b1", Mat::Zero(1, d));
    add_param("time/w2", gaussian(rng, d, d, 0.02));
    add_param("time/b2", Mat::Zero(1, d));
    for (int b = 0; b < config_.n_blocks; ++b)
      for (Branch br : kBranches) {
        add_param(block_name(b, br, "ada_w"), Mat::Zero(6 * d, d));
        add_param(block_name(b, br, "ada_b"), Mat::Zero(1, 6 * d));
        for (const char* p : {"q", "k", "v", "o"}) {
          add_param(block_name(b, br, std::string(p) + "_w"), xavier(rng, d, d));
          add_param(block_name(b, br, std::string(p) + "_b"), Mat::Zero(1, d));
        }
        add_param(block_name(b, br, "ff1_w"), xavier(rng, 4 * d, d));
        add_param(block_name(b, br, "ff1_b"), Mat::Zero(1, 4 * d));
        add_param(block_name(b, br, "ff2_w"), xavier(rng, d, 4 * d));
        add_param(block_name(b, br, "ff2_b"), Mat::Zero(1, d));
      }
    add_param("final/ada_w", Mat::Zero(2 * d, d));
    add_param("final/ada_b", Mat::Zero(1, 2 * d));
    add_param("final/out_w", Mat::Zero(config_.noise_patch_dim, d));
    add_param("final/out_b", Mat::Zero(1, config_.noise_patch_dim));
    for (Adapter a : {Adapter::skeletal, Adapter::appearance}) {
      Rng arng(Rng::derive(config_.seed, a == Adapter::skeletal ? 0x5CE1 : 0xA77E));
      for (int b = 0; b < config_.n_blocks; ++b)
        for (Proj p : {Proj::q, Proj::k, Proj::v}) {
          add_param(lora_name(a, b, p, 'A'), gaussian(arng, config_.lora_rank, d, 0.02));
          add_param(lora_name(a, b, p, 'B'), Mat::Zero(d, config_.lora_rank));
        }
    }
  }

  ModelConfig config_;
  std::map<std::string, Var> params_;
  Adapter active_ = Adapter::skeletal;
};

/// FNV-1a over the raw bytes of the selected parameters, in name order.
template <class T>
std::uint64_t hash_params(const Backbone<T>& model, const std::vector<std::string>& names) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& n : names) {
    const auto& m = model.param(n).value();
    h = fnv1a(n, h);
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(T)), h);
  }
  return h;
}

}  // namespace skeleguide
