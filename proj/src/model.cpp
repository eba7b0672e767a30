#include "caveseg/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace caveseg {

namespace {

constexpr double kMaskBlock = -1e30;

std::int64_t ceil_to_multiple(std::int64_t v, std::int64_t m) {
  return (v + m - 1) / m * m;
}

void check_image(const Tensor& image, const char* op) {
  if (!image.defined() || image.rank() != 3 || image.dim(0) != 3)
    throw std::invalid_argument(std::string(op) + ": need a [3,H,W] image, got " +
                                (image.defined() ? shape_str(image.shape())
                                                 : std::string("undefined")));
}

}  // namespace

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.embed_dim = 8;
  c.depths = {1, 1, 1, 1};
  c.num_heads = {1, 2, 4, 8};
  c.window_size = 4;
  c.fusion_channels = 32;
  c.input_h = 64;
  c.input_w = 64;
  return c;
}

void ModelConfig::validate() const {
  if (patch_size < 1) throw std::invalid_argument("config: patch_size must be >= 1");
  if (window_size < 1)
    throw std::invalid_argument("config: window_size must be >= 1");
  if (num_classes < 2)
    throw std::invalid_argument("config: num_classes must be >= 2");
  if (embed_dim < 1) throw std::invalid_argument("config: embed_dim must be >= 1");
  if (depths.size() != 4 || num_heads.size() != 4)
    throw std::invalid_argument("config: depths and num_heads must list 4 stages");
  for (int s = 0; s < 4; ++s) {
    if (depths[static_cast<std::size_t>(s)] < 1)
      throw std::invalid_argument("config: stage depth must be >= 1");
    const int heads = num_heads[static_cast<std::size_t>(s)];
    if (heads < 1 || stage_channels(s) % heads != 0)
      throw std::invalid_argument(
          "config: stage " + std::to_string(s) + " dimension " +
          std::to_string(stage_channels(s)) + " not divisible by " +
          std::to_string(heads) + " heads");
  }
  if (mlp_ratio <= 0.0) throw std::invalid_argument("config: mlp_ratio must be > 0");
  if (ppm_scales.empty())
    throw std::invalid_argument("config: ppm_scales must be nonempty");
  for (int s : ppm_scales)
    if (s < 1) throw std::invalid_argument("config: ppm scales must be >= 1");
  if (fusion_channels < 4 || fusion_channels % 4 != 0)
    throw std::invalid_argument("config: fusion_channels must be a positive multiple of 4");
  if (num_classes < 2)
    throw std::invalid_argument("config: num_classes must be >= 2");
  if (norm_eps <= 0.0) throw std::invalid_argument("config: norm_eps must be > 0");
  if (input_h < patch_size || input_w < patch_size)
    throw std::invalid_argument("config: input dims must be >= patch_size");
}

int norm_group_count(int channels) {
  for (int g : {8, 4, 2, 1})
    if (channels % g == 0) return g;
  return 1;
}

Tensor linear(const Tensor& x, const LinearWeights& w) {
  Tensor y = matmul(x, w.weight);
  if (w.bias.defined()) y = add_row_bias(y, w.bias);
  return y;
}

Tensor conv_unit_forward(const ConvUnit& u, const Tensor& x, double eps) {
  Tensor y = conv2d(x, u.kernel, Tensor(), u.stride, u.padding);
  y = group_norm(y, u.norm.gamma, u.norm.beta,
                 norm_group_count(static_cast<int>(u.kernel.dim(0))), eps);
  return relu(y);
}

Tensor map_to_tokens(const Tensor& fm) {
  if (fm.rank() != 3)
    throw std::invalid_argument("map_to_tokens: need [C,h,w], got " +
                                shape_str(fm.shape()));
  const std::int64_t c = fm.dim(0), hw = fm.dim(1) * fm.dim(2);
  std::vector<std::int64_t> idx(static_cast<std::size_t>(hw * c));
  for (std::int64_t t = 0; t < hw; ++t)
    for (std::int64_t ch = 0; ch < c; ++ch)
      idx[static_cast<std::size_t>(t * c + ch)] = ch * hw + t;
  return gather(fm, {hw, c}, std::move(idx));
}

Tensor tokens_to_map(const Tensor& tokens, std::int64_t h, std::int64_t w) {
  if (tokens.rank() != 2 || tokens.dim(0) != h * w)
    throw std::invalid_argument("tokens_to_map: need [" + std::to_string(h * w) +
                                ",C], got " + shape_str(tokens.shape()));
  const std::int64_t c = tokens.dim(1), hw = h * w;
  std::vector<std::int64_t> idx(static_cast<std::size_t>(hw * c));
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t t = 0; t < hw; ++t)
      idx[static_cast<std::size_t>(ch * hw + t)] = t * c + ch;
  return gather(tokens, {c, h, w}, std::move(idx));
}

Tensor pad_to_multiple(const Tensor& image, int mh, int mw) {
  if (image.rank() != 3)
    throw std::invalid_argument("pad_to_multiple: need [C,H,W], got " +
                                shape_str(image.shape()));
  if (mh < 1 || mw < 1)
    throw std::invalid_argument("pad_to_multiple: multiples must be >= 1");
  const std::int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const std::int64_t hp = ceil_to_multiple(h, mh), wp = ceil_to_multiple(w, mw);
  if (hp == h && wp == w) return image;
  std::vector<std::int64_t> idx(static_cast<std::size_t>(c * hp * wp));
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t y = 0; y < hp; ++y)
      for (std::int64_t x = 0; x < wp; ++x)
        idx[static_cast<std::size_t>((ch * hp + y) * wp + x)] =
            (y < h && x < w) ? (ch * h + y) * w + x : -1;
  return gather(image, {c, hp, wp}, std::move(idx));
}

Tensor patch_embed(const Tensor& image, const PatchEmbedWeights& w,
                   const ModelConfig& cfg) {
  check_image(image, "patch_embed");
  const std::int64_t p = cfg.patch_size;
  const std::int64_t h = image.dim(1), wd = image.dim(2);
  if (h % p != 0 || wd % p != 0)
    throw std::invalid_argument(
        "patch_embed: input " + shape_str(image.shape()) +
        " not divisible by patch_size " + std::to_string(p) +
        "; call pad_to_multiple first");
  const std::int64_t th = h / p, tw = wd / p, k = p * p * 3;
  std::vector<std::int64_t> idx(static_cast<std::size_t>(th * tw * k));
  for (std::int64_t ty = 0; ty < th; ++ty)
    for (std::int64_t tx = 0; tx < tw; ++tx) {
      const std::int64_t row = (ty * tw + tx) * k;
      for (std::int64_t ch = 0; ch < 3; ++ch)
        for (std::int64_t py = 0; py < p; ++py)
          for (std::int64_t px = 0; px < p; ++px)
            idx[static_cast<std::size_t>(row + (ch * p + py) * p + px)] =
                (ch * h + ty * p + py) * wd + tx * p + px;
    }
  Tensor tokens = gather(image, {th * tw, k}, std::move(idx));
  tokens = linear(tokens, w.proj);
  tokens = layer_norm(tokens, w.norm.gamma, w.norm.beta, cfg.norm_eps);
  return tokens_to_map(tokens, th, tw);
}

WindowSet window_partition(const Tensor& fm, int window, int shift) {
  if (fm.rank() != 3)
    throw std::invalid_argument("window_partition: need [C,h,w], got " +
                                shape_str(fm.shape()));
  if (window < 1 || shift < 0 || shift >= window)
    throw std::invalid_argument("window_partition: need 0 <= shift < window, got shift " +
                                std::to_string(shift) + ", window " +
                                std::to_string(window));
  WindowSet ws;
  ws.h = fm.dim(1);
  ws.w = fm.dim(2);
  ws.window = window;
  ws.shift = shift;
  const std::int64_t c = fm.dim(0);
  const std::int64_t hp = ceil_to_multiple(ws.h, window);
  const std::int64_t wp = ceil_to_multiple(ws.w, window);
  ws.nwy = hp / window;
  ws.nwx = wp / window;
  const std::int64_t nw = ws.nwy * ws.nwx, n = static_cast<std::int64_t>(window) * window;

  Tensor tokens = map_to_tokens(fm);
  std::vector<std::int64_t> idx(static_cast<std::size_t>(nw * n * c));
  std::vector<double> mask(static_cast<std::size_t>(nw * n * n), 0.0);
  ws.has_blocked.assign(static_cast<std::size_t>(nw), false);
  std::vector<int> region(static_cast<std::size_t>(n));

  for (std::int64_t wy = 0; wy < ws.nwy; ++wy) {
    for (std::int64_t wx = 0; wx < ws.nwx; ++wx) {
      const std::int64_t wi = wy * ws.nwx + wx;
      for (std::int64_t iy = 0; iy < window; ++iy) {
        for (std::int64_t ix = 0; ix < window; ++ix) {
          const std::int64_t t = iy * window + ix;
          const std::int64_t oy = (wy * window + iy + shift) % hp;
          const std::int64_t ox = (wx * window + ix + shift) % wp;
          const bool real = oy < ws.h && ox < ws.w;
          const std::int64_t src = real ? oy * ws.w + ox : -1;
          for (std::int64_t ch = 0; ch < c; ++ch)
            idx[static_cast<std::size_t>(((wi * n + t) * c) + ch)] =
                src < 0 ? -1 : src * c + ch;
          const int ry = oy >= ws.h ? 2 : (oy < shift ? 1 : 0);
          const int rx = ox >= ws.w ? 2 : (ox < shift ? 1 : 0);
          region[static_cast<std::size_t>(t)] = ry * 3 + rx;
        }
      }
      double* mblk = mask.data() + wi * n * n;
      for (std::int64_t a = 0; a < n; ++a)
        for (std::int64_t b = 0; b < n; ++b)
          if (region[static_cast<std::size_t>(a)] !=
              region[static_cast<std::size_t>(b)]) {
            mblk[a * n + b] = kMaskBlock;
            ws.has_blocked[static_cast<std::size_t>(wi)] = true;
          }
    }
  }
  ws.windows = reshape(gather(tokens, {nw * n, c}, std::move(idx)), {nw, n, c});
  ws.mask = Tensor::from_data({nw, n, n}, std::move(mask));
  return ws;
}

Tensor window_reverse(const WindowSet& ws) {
  const std::int64_t c = ws.windows.dim(2), n = ws.window * ws.window;
  const std::int64_t hp = ws.nwy * ws.window, wp = ws.nwx * ws.window;
  Tensor flat = reshape(ws.windows, {ws.nwy * ws.nwx * n, c});
  std::vector<std::int64_t> idx(static_cast<std::size_t>(ws.h * ws.w * c));
  for (std::int64_t r = 0; r < ws.h; ++r) {
    const std::int64_t rp = (r - ws.shift + hp) % hp;
    for (std::int64_t col = 0; col < ws.w; ++col) {
      const std::int64_t cp = (col - ws.shift + wp) % wp;
      const std::int64_t wi = (rp / ws.window) * ws.nwx + cp / ws.window;
      const std::int64_t t = (rp % ws.window) * ws.window + cp % ws.window;
      for (std::int64_t ch = 0; ch < c; ++ch)
        idx[static_cast<std::size_t>((r * ws.w + col) * c + ch)] =
            (wi * n + t) * c + ch;
    }
  }
  Tensor tokens = gather(flat, {ws.h * ws.w, c}, std::move(idx));
  return tokens_to_map(tokens, ws.h, ws.w);
}

Tensor windowed_attention(const WindowSet& ws, const AttentionWeights& w,
                          int num_heads, AttentionProbe* probe) {
  const std::int64_t nw = ws.windows.dim(0), n = ws.windows.dim(1),
                     c = ws.windows.dim(2);
  if (num_heads < 1 || c % num_heads != 0)
    throw std::invalid_argument("windowed_attention: " + std::to_string(c) +
                                " channels not divisible by " +
                                std::to_string(num_heads) + " heads");
  const std::int64_t dh = c / num_heads;
  const double s = 1.0 / std::sqrt(static_cast<double>(dh));
  if (probe) probe->heads = num_heads;

  Tensor qkv = linear(reshape(ws.windows, {nw * n, c}), w.qkv);
  const auto& mv = ws.mask.values();

  auto slice = [&](std::int64_t wi, std::int64_t offset) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n * dh));
    for (std::int64_t t = 0; t < n; ++t)
      for (std::int64_t j = 0; j < dh; ++j)
        idx[static_cast<std::size_t>(t * dh + j)] =
            (wi * n + t) * 3 * c + offset + j;
    return gather(qkv, {n, dh}, std::move(idx));
  };

  std::vector<Tensor> win_outs;
  win_outs.reserve(static_cast<std::size_t>(nw));
  for (std::int64_t wi = 0; wi < nw; ++wi) {
    std::vector<Tensor> head_outs;
    head_outs.reserve(static_cast<std::size_t>(num_heads));
    for (std::int64_t hd = 0; hd < num_heads; ++hd) {
      Tensor q = slice(wi, hd * dh);
      Tensor k = slice(wi, c + hd * dh);
      Tensor v = slice(wi, 2 * c + hd * dh);
      Tensor scores = scale(matmul(q, transpose2d(k)), s);
      if (ws.has_blocked[static_cast<std::size_t>(wi)]) {
        std::vector<double> mblk(mv.begin() + wi * n * n,
                                 mv.begin() + (wi + 1) * n * n);
        scores = add(scores, Tensor::from_data({n, n}, std::move(mblk)));
      }
      Tensor attn = softmax(scores, 1);
      if (probe) probe->weights.push_back(attn);
      head_outs.push_back(matmul(attn, v));
    }
    win_outs.push_back(num_heads == 1 ? head_outs[0] : concat(head_outs, 1));
  }
  Tensor out = nw == 1 ? win_outs[0] : concat(win_outs, 0);
  out = linear(reshape(out, {nw * n, c}), w.proj);
  return reshape(out, {nw, n, c});
}

Tensor swin_block(const Tensor& tokens, std::int64_t h, std::int64_t w,
                  const BlockWeights& bw, int num_heads, int window,
                  bool shifted, double eps, AttentionProbe* probe) {
  const int eff = static_cast<int>(
      std::min<std::int64_t>(window, std::min(h, w)));
  const int shift = (shifted && eff == window) ? window / 2 : 0;

  Tensor x = layer_norm(tokens, bw.norm1.gamma, bw.norm1.beta, eps);
  WindowSet ws = window_partition(tokens_to_map(x, h, w), eff, shift);
  ws.windows = windowed_attention(ws, bw.attn, num_heads, probe);
  Tensor attn_out = map_to_tokens(window_reverse(ws));
  x = add(tokens, attn_out);

  Tensor y = layer_norm(x, bw.norm2.gamma, bw.norm2.beta, eps);
  y = linear(y, bw.fc1);
  y = gelu(y);
  y = linear(y, bw.fc2);
  return add(x, y);
}

Tensor patch_merge(const Tensor& fm, const MergeWeights& w, double eps) {
  if (fm.rank() != 3)
    throw std::invalid_argument("patch_merge: need [C,h,w], got " +
                                shape_str(fm.shape()));
  const std::int64_t c = fm.dim(0), h = fm.dim(1), wd = fm.dim(2);
  const std::int64_t h2 = (h + 1) / 2, w2 = (wd + 1) / 2;
  Tensor tokens = map_to_tokens(fm);
  std::vector<std::int64_t> idx(static_cast<std::size_t>(h2 * w2 * 4 * c));
  for (std::int64_t r = 0; r < h2; ++r)
    for (std::int64_t col = 0; col < w2; ++col) {
      const std::int64_t row = (r * w2 + col) * 4 * c;
      for (std::int64_t pos = 0; pos < 4; ++pos) {
        const std::int64_t sr = 2 * r + pos / 2, sc = 2 * col + pos % 2;
        const bool real = sr < h && sc < wd;
        for (std::int64_t ch = 0; ch < c; ++ch)
          idx[static_cast<std::size_t>(row + pos * c + ch)] =
              real ? (sr * wd + sc) * c + ch : -1;
      }
    }
  Tensor merged = gather(tokens, {h2 * w2, 4 * c}, std::move(idx));
  merged = layer_norm(merged, w.norm.gamma, w.norm.beta, eps);
  merged = linear(merged, w.reduce);
  return tokens_to_map(merged, h2, w2);
}

CaveSegModel::CaveSegModel(ModelConfig config, std::uint64_t seed)
    : cfg_(std::move(config)) {
  cfg_.validate();
  Rng rng(seed);
  auto tn = [&rng](Shape s) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(s)));
    for (double& e : v) e = rng.truncated_normal(0.02);
    return Tensor::from_data(std::move(s), std::move(v), true);
  };
  auto zeros = [](Shape s) { return Tensor::zeros(std::move(s), true); };
  auto ones = [](Shape s) { return Tensor::full(std::move(s), 1.0, true); };
  auto norm = [&](std::int64_t c) {
    return NormWeights{ones({c}), zeros({c})};
  };
  auto conv_unit = [&](std::int64_t co, std::int64_t ci, std::int64_t k,
                       int stride, int padding) {
    return ConvUnit{tn({co, ci, k, k}), norm(co), stride, padding};
  };

  const std::int64_t p = cfg_.patch_size, e = cfg_.embed_dim;
  w_.embed.proj = {tn({p * p * 3, e}), zeros({e})};
  w_.embed.norm = norm(e);

  for (int s = 0; s < cfg_.num_stages(); ++s) {
    const std::int64_t c = cfg_.stage_channels(s);
    const std::int64_t hidden =
        static_cast<std::int64_t>(static_cast<double>(c) * cfg_.mlp_ratio);
    std::vector<BlockWeights> blocks;
    for (int b = 0; b < cfg_.depths[static_cast<std::size_t>(s)]; ++b) {
      BlockWeights bw;
      bw.norm1 = norm(c);
      bw.attn.qkv = {tn({c, 3 * c}), zeros({3 * c})};
      bw.attn.proj = {tn({c, c}), zeros({c})};
      bw.norm2 = norm(c);
      bw.fc1 = {tn({c, hidden}), zeros({hidden})};
      bw.fc2 = {tn({hidden, c}), zeros({c})};
      blocks.push_back(std::move(bw));
    }
    w_.stages.push_back(std::move(blocks));
    if (s + 1 < cfg_.num_stages()) {
      MergeWeights mw;
      mw.norm = norm(4 * c);
      mw.reduce = {tn({4 * c, 2 * c}), Tensor()};
      w_.merges.push_back(std::move(mw));
    }
  }

  const std::int64_t c3 = cfg_.stage_channels(3);
  const std::int64_t fc = cfg_.fusion_channels, fq = fc / 4;
  for (std::size_t i = 0; i < cfg_.ppm_scales.size(); ++i)
    w_.ppm_branches.push_back(conv_unit(fq, c3, 1, 1, 0));
  w_.ppm_fuse = conv_unit(fc, c3 + fq * static_cast<std::int64_t>(cfg_.ppm_scales.size()),
                          3, 1, 1);
  for (int i = 0; i < 3; ++i)
    w_.laterals.push_back(conv_unit(fc, cfg_.stage_channels(i), 1, 1, 0));
  for (int i = 0; i < 3; ++i) w_.td_smooth.push_back(conv_unit(fc, fc, 3, 1, 1));
  for (int i = 0; i < 3; ++i) w_.bu_down.push_back(conv_unit(fc, fc, 3, 2, 1));
  w_.fuse = conv_unit(fc, 8 * fc, 3, 1, 1);
  w_.classifier_w = tn({cfg_.num_classes, fc, 1, 1});
  w_.classifier_b = zeros({cfg_.num_classes});
}

void CaveSegModel::visit_parameters(
    const std::function<void(const std::string&, Tensor&)>& fn) {
  auto visit_norm = [&](const std::string& p, NormWeights& n) {
    fn(p + ".gamma", n.gamma);
    fn(p + ".beta", n.beta);
  };
  auto visit_linear = [&](const std::string& p, LinearWeights& l) {
    fn(p + ".weight", l.weight);
    if (l.bias.defined()) fn(p + ".bias", l.bias);
  };
  auto visit_conv = [&](const std::string& p, ConvUnit& u) {
    fn(p + ".kernel", u.kernel);
    visit_norm(p + ".norm", u.norm);
  };

  visit_linear("embed.proj", w_.embed.proj);
  visit_norm("embed.norm", w_.embed.norm);
  for (std::size_t s = 0; s < w_.stages.size(); ++s)
    for (std::size_t b = 0; b < w_.stages[s].size(); ++b) {
      const std::string p =
          "stages." + std::to_string(s) + ".blocks." + std::to_string(b);
      BlockWeights& bw = w_.stages[s][b];
      visit_norm(p + ".norm1", bw.norm1);
      visit_linear(p + ".attn.qkv", bw.attn.qkv);
      visit_linear(p + ".attn.proj", bw.attn.proj);
      visit_norm(p + ".norm2", bw.norm2);
      visit_linear(p + ".mlp.fc1", bw.fc1);
      visit_linear(p + ".mlp.fc2", bw.fc2);
    }
  for (std::size_t s = 0; s < w_.merges.size(); ++s) {
    const std::string p = "merges." + std::to_string(s);
    visit_norm(p + ".norm", w_.merges[s].norm);
    visit_linear(p + ".reduce", w_.merges[s].reduce);
  }
  for (std::size_t i = 0; i < w_.ppm_branches.size(); ++i)
    visit_conv("ppm.branches." + std::to_string(i), w_.ppm_branches[i]);
  visit_conv("ppm.fuse", w_.ppm_fuse);
  for (std::size_t i = 0; i < w_.laterals.size(); ++i)
    visit_conv("agg.laterals." + std::to_string(i), w_.laterals[i]);
  for (std::size_t i = 0; i < w_.td_smooth.size(); ++i)
    visit_conv("agg.td_smooth." + std::to_string(i), w_.td_smooth[i]);
  for (std::size_t i = 0; i < w_.bu_down.size(); ++i)
    visit_conv("agg.bu_down." + std::to_string(i), w_.bu_down[i]);
  visit_conv("agg.fuse", w_.fuse);
  fn("classifier.weight", w_.classifier_w);
  fn("classifier.bias", w_.classifier_b);
}

std::vector<std::pair<std::string, Tensor>> CaveSegModel::parameters() {
  std::vector<std::pair<std::string, Tensor>> out;
  visit_parameters([&](const std::string& name, Tensor& t) {
    out.emplace_back(name, t);
  });
  return out;
}

std::int64_t CaveSegModel::count_parameters() {
  std::int64_t n = 0;
  visit_parameters([&](const std::string&, Tensor& t) { n += t.numel(); });
  return n;
}

void CaveSegModel::zero_grad() {
  visit_parameters([](const std::string&, Tensor& t) { t.clear_grad(); });
}

std::vector<Tensor> CaveSegModel::backbone_forward(const Tensor& image) const {
  check_image(image, "backbone_forward");
  const int pm = cfg_.pad_multiple();
  if (image.dim(1) % pm != 0 || image.dim(2) % pm != 0)
    throw std::invalid_argument("backbone_forward: input " +
                                shape_str(image.shape()) +
                                " not a multiple of " + std::to_string(pm) +
                                "; call pad_to_multiple first");
  Tensor fm = patch_embed(image, w_.embed, cfg_);
  std::int64_t h = fm.dim(1), w = fm.dim(2);
  Tensor tokens = map_to_tokens(fm);

  std::vector<Tensor> maps;
  for (int s = 0; s < cfg_.num_stages(); ++s) {
    const auto& blocks = w_.stages[static_cast<std::size_t>(s)];
    for (std::size_t b = 0; b < blocks.size(); ++b)
      tokens = swin_block(tokens, h, w, blocks[b],
                          cfg_.num_heads[static_cast<std::size_t>(s)],
                          cfg_.window_size, b % 2 == 1, cfg_.norm_eps);
    maps.push_back(tokens_to_map(tokens, h, w));
    if (s + 1 < cfg_.num_stages()) {
      Tensor merged =
          patch_merge(maps.back(), w_.merges[static_cast<std::size_t>(s)],
                      cfg_.norm_eps);
      h = merged.dim(1);
      w = merged.dim(2);
      tokens = map_to_tokens(merged);
    }
  }
  return maps;
}

Tensor CaveSegModel::ppm_forward(const Tensor& stage3) const {
  if (stage3.rank() != 3 || stage3.dim(0) != cfg_.stage_channels(3))
    throw std::invalid_argument("ppm_forward: expected [" +
                                std::to_string(cfg_.stage_channels(3)) +
                                ",h,w], got " + shape_str(stage3.shape()));
  const int h = static_cast<int>(stage3.dim(1));
  const int w = static_cast<int>(stage3.dim(2));
  std::vector<Tensor> parts{stage3};
  for (std::size_t i = 0; i < cfg_.ppm_scales.size(); ++i) {
    const int scale = cfg_.ppm_scales[i];
    Tensor pooled =
        adaptive_avg_pool2d(stage3, std::min(scale, h), std::min(scale, w));
    Tensor ctx = conv_unit_forward(w_.ppm_branches[i], pooled, cfg_.norm_eps);
    parts.push_back(bilinear_resize(ctx, h, w));
  }
  return conv_unit_forward(w_.ppm_fuse, concat(parts, 0), cfg_.norm_eps);
}

Tensor CaveSegModel::aggregate_features(const std::vector<Tensor>& stages,
                                        const Tensor& ppm_out) const {
  if (stages.size() != 4)
    throw std::invalid_argument("aggregate_features: expected 4 stage maps, got " +
                                std::to_string(stages.size()));
  const double eps = cfg_.norm_eps;
  std::vector<Tensor> lat;
  for (int i = 0; i < 3; ++i)
    lat.push_back(conv_unit_forward(w_.laterals[static_cast<std::size_t>(i)],
                                    stages[static_cast<std::size_t>(i)], eps));

  // Top-down: coarse context flows into finer laterals, each refined level
  // smoothed once.
  std::vector<Tensor> acc(4);
  acc[3] = ppm_out;
  for (int i = 2; i >= 0; --i)
    acc[static_cast<std::size_t>(i)] =
        add(lat[static_cast<std::size_t>(i)],
            bilinear_resize(acc[static_cast<std::size_t>(i + 1)],
                            static_cast<int>(lat[static_cast<std::size_t>(i)].dim(1)),
                            static_cast<int>(lat[static_cast<std::size_t>(i)].dim(2))));
  std::vector<Tensor> levels;
  for (int i = 0; i < 3; ++i)
    levels.push_back(conv_unit_forward(w_.td_smooth[static_cast<std::size_t>(i)],
                                       acc[static_cast<std::size_t>(i)], eps));
  levels.push_back(ppm_out);

  // Bottom-up: fine detail propagates coarseward through strided convs.
  Tensor n = lat[0];
  levels.push_back(n);
  for (int i = 1; i < 4; ++i) {
    Tensor down =
        conv_unit_forward(w_.bu_down[static_cast<std::size_t>(i - 1)], n, eps);
    n = add(i < 3 ? lat[static_cast<std::size_t>(i)] : ppm_out, down);
    levels.push_back(n);
  }

  const int h0 = static_cast<int>(stages[0].dim(1));
  const int w0 = static_cast<int>(stages[0].dim(2));
  std::vector<Tensor> resized;
  for (const Tensor& lv : levels) resized.push_back(bilinear_resize(lv, h0, w0));
  return conv_unit_forward(w_.fuse, concat(resized, 0), eps);
}

Tensor CaveSegModel::forward(const Tensor& image) const {
  check_image(image, "model_forward");
  const std::int64_t h = image.dim(1), w = image.dim(2);
  if (h < cfg_.patch_size || w < cfg_.patch_size)
    throw std::invalid_argument("model_forward: input " +
                                shape_str(image.shape()) +
                                " smaller than patch_size " +
                                std::to_string(cfg_.patch_size));
  const int pm = cfg_.pad_multiple();
  Tensor padded = pad_to_multiple(image, pm, pm);
  const std::int64_t hp = padded.dim(1), wp = padded.dim(2);

  std::vector<Tensor> stages = backbone_forward(padded);
  Tensor ctx = ppm_forward(stages[3]);
  Tensor fused = aggregate_features(stages, ctx);
  Tensor logits = conv2d(fused, w_.classifier_w, w_.classifier_b, 1, 0);
  logits = bilinear_resize(logits, static_cast<int>(hp), static_cast<int>(wp));
  if (hp == h && wp == w) return logits;

  const std::int64_t m = cfg_.num_classes;
  std::vector<std::int64_t> idx(static_cast<std::size_t>(m * h * w));
  for (std::int64_t ch = 0; ch < m; ++ch)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x)
        idx[static_cast<std::size_t>((ch * h + y) * w + x)] =
            (ch * hp + y) * wp + x;
  return gather(logits, {m, h, w}, std::move(idx));
}

}  // namespace caveseg
