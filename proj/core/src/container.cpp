#include "bdlab/container.hpp"

#include "bdlab/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace bdlab {

namespace {

constexpr char kMagic[4] = {'B', 'D', 'L', 'B'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& out, float f) {
    put_u32(out, std::bit_cast<std::uint32_t>(f));
}

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }

    float f32(const char* what) { return std::bit_cast<float>(u32(what)); }

    std::string str(std::size_t n, const char* what) {
        need(n, what);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    std::size_t pos() const { return pos_; }
    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n, const char* what) {
        if (bytes_.size() - pos_ < n) throw FormatError(std::string("truncated container while reading ") + what, pos_);
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

} // namespace

const NamedTensor* Container::find(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return &t;
    return nullptr;
}

const NamedTensor& Container::at(const std::string& name) const {
    if (const auto* t = find(name)) return *t;
    throw FormatError("container has no tensor named '" + name + "'", 0);
}

std::vector<std::uint8_t> encode_container(const Container& c) {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u32(out, c.version);
    put_u32(out, static_cast<std::uint32_t>(c.metadata.size()));
    out.insert(out.end(), c.metadata.begin(), c.metadata.end());
    put_u32(out, static_cast<std::uint32_t>(c.tensors.size()));
    for (const auto& t : c.tensors) {
        if (shape_numel(t.shape) != t.values.size()) {
            throw DimensionError("tensor '" + t.name + "' shape " + shape_str(t.shape) + " does not match " +
                                 std::to_string(t.values.size()) + " values");
        }
        put_u32(out, static_cast<std::uint32_t>(t.name.size()));
        out.insert(out.end(), t.name.begin(), t.name.end());
        put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
        for (std::size_t d : t.shape) put_u32(out, static_cast<std::uint32_t>(d));
        for (float f : t.values) put_f32(out, f);
    }
    return out;
}

Container decode_container(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    const std::string magic = r.str(4, "magic");
    if (std::memcmp(magic.data(), kMagic, 4) != 0) throw FormatError("bad container magic", 0);
    Container c;
    c.version = r.u32("version");
    if (c.version != kContainerVersion) {
        throw FormatError("unsupported container version " + std::to_string(c.version), 4);
    }
    const std::uint32_t meta_len = r.u32("metadata length");
    c.metadata = r.str(meta_len, "metadata");
    const std::uint32_t count = r.u32("tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        const std::uint32_t name_len = r.u32("tensor name length");
        t.name = r.str(name_len, "tensor name");
        const std::uint32_t rank = r.u32("tensor rank");
        if (rank == 0 || rank > 8) throw FormatError("implausible rank for tensor '" + t.name + "'", r.pos() - 4);
        for (std::uint32_t d = 0; d < rank; ++d) {
            const std::uint32_t extent = r.u32("tensor extent");
            if (extent == 0) throw FormatError("zero extent in tensor '" + t.name + "'", r.pos() - 4);
            t.shape.push_back(extent);
        }
        const std::size_t n = shape_numel(t.shape);
        t.values.reserve(n);
        for (std::size_t k = 0; k < n; ++k) t.values.push_back(r.f32("tensor values"));
        c.tensors.push_back(std::move(t));
    }
    if (!r.done()) throw FormatError("trailing bytes after container", r.pos());
    return c;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

void write_container(const Container& c, const std::filesystem::path& path) {
    const auto bytes = encode_container(c);
    write_file_bytes(path, bytes);
}

Container read_container(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    return decode_container(bytes);
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t fnv1a64(const std::string& text) {
    return fnv1a64(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

} // namespace bdlab
