#pragma once

#include "bdlab/rng.hpp"
#include "bdlab/tensor.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace bdlab::test {

template <typename T = float>
BasicTensor<T> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0, bool requires_grad = false) {
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
    return BasicTensor<T>(std::move(shape), std::move(v), requires_grad);
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag);
    ~TempDir();
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

std::string slurp(const std::filesystem::path& p);

} // namespace bdlab::test
