/**
 * @file checkpoint.hpp
 * @brief "MVAE1" checkpoint files.
 *
 * Little-endian throughout:
 *   "MVAE1"
 *   u32 bars, vocab, embed_dim, enc_hidden, latent_dim, dec_hidden, conductor_dim
 *   u64 seed, u64 step
 *   f64 beta_start, f64 beta_end, u64 beta_ramp_steps
 *   u32 tensor_count
 *   per tensor: u32 name_len, name, u32 rank (2), u32 rows, u32 cols, f32 data (column-major)
 *
 * Tensors are the weights followed by the Adam moments ("adam_m/<name>",
 * "adam_v/<name>"). Loading validates every shape against the config.
 */

#pragma once

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <stdexcept>
#include <string>

#include "duet/genmodel/model.hpp"

namespace duet {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::array<char, 5> kCheckpointMagic = {'M', 'V', 'A', 'E', '1'};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw CheckpointError("truncated checkpoint");
  return v;
}

}  // namespace detail

inline void save_checkpoint(std::ostream& os, const ModelState& state) {
  using detail::put;
  const auto& c = state.config;
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  for (int v : {c.bars, c.vocab, c.embed_dim, c.enc_hidden, c.latent_dim, c.dec_hidden, c.conductor_dim}) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(v));
  }
  put<std::uint64_t>(os, c.seed);
  put<std::uint64_t>(os, state.step);
  put<double>(os, state.beta.start);
  put<double>(os, state.beta.end);
  put<std::uint64_t>(os, state.beta.ramp_steps);

  std::vector<std::pair<std::string, const Matrix*>> tensors;
  state.weights.for_each([&](const std::string& n, const Matrix& m) { tensors.emplace_back(n, &m); });
  state.adam_m.for_each([&](const std::string& n, const Matrix& m) { tensors.emplace_back("adam_m/" + n, &m); });
  state.adam_v.for_each([&](const std::string& n, const Matrix& m) { tensors.emplace_back("adam_v/" + n, &m); });
  put<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, m] : tensors) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(os, 2);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(m->rows()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(m->cols()));
    for (Eigen::Index i = 0; i < m->size(); ++i) put<float>(os, static_cast<float>(m->data()[i]));
  }
  if (!os) throw CheckpointError("failed to write checkpoint");
}

inline ModelState load_checkpoint(std::istream& is) {
  using detail::get;
  std::array<char, 5> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kCheckpointMagic) throw CheckpointError("not an MVAE1 checkpoint");

  ModelConfig c;
  for (int* field : {&c.bars, &c.vocab, &c.embed_dim, &c.enc_hidden, &c.latent_dim, &c.dec_hidden, &c.conductor_dim}) {
    *field = static_cast<int>(get<std::uint32_t>(is));
  }
  c.seed = get<std::uint64_t>(is);
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("invalid checkpoint config: ") + e.what());
  }
  ModelState state = init_model(c);
  state.step = get<std::uint64_t>(is);
  state.beta.start = get<double>(is);
  state.beta.end = get<double>(is);
  state.beta.ramp_steps = get<std::uint64_t>(is);

  std::map<std::string, Matrix*> slots;
  state.weights.for_each([&](const std::string& n, Matrix& m) { slots[n] = &m; });
  state.adam_m.for_each([&](const std::string& n, Matrix& m) { slots["adam_m/" + n] = &m; });
  state.adam_v.for_each([&](const std::string& n, Matrix& m) { slots["adam_v/" + n] = &m; });

  const auto count = get<std::uint32_t>(is);
  if (count != slots.size()) throw CheckpointError("tensor count does not match config");
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto len = get<std::uint32_t>(is);
    if (len > 256) throw CheckpointError("tensor name too long");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw CheckpointError("truncated checkpoint");
    const auto it = slots.find(name);
    if (it == slots.end()) throw CheckpointError("unexpected tensor '" + name + "'");
    if (get<std::uint32_t>(is) != 2) throw CheckpointError("tensor '" + name + "' must have rank 2");
    const auto rows = get<std::uint32_t>(is);
    const auto cols = get<std::uint32_t>(is);
    Matrix& m = *it->second;
    if (rows != m.rows() || cols != m.cols()) {
      throw CheckpointError("shape mismatch for '" + name + "': file " + std::to_string(rows) + "x" +
                            std::to_string(cols) + ", config " + std::to_string(m.rows()) + "x" +
                            std::to_string(m.cols()));
    }
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = get<float>(is);
    slots.erase(it);
  }
  return state;
}

inline void save_checkpoint(const std::string& path, const ModelState& state) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open " + path + " for writing");
  save_checkpoint(os, state);
}

inline ModelState load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open " + path);
  return load_checkpoint(is);
}

}  // namespace duet
