#include "emorl/scene_data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <random>

#include "emorl/errors.hpp"

namespace emorl {
namespace {

// Cell offsets (row, col) of the 19 fixed tetromino orientations.
using Cells = std::array<std::array<int, 2>, 4>;
constexpr std::array<Cells, kTetrominoCount> kTetrominoes{{
    {{{0, 0}, {0, 1}, {0, 2}, {0, 3}}},  // I
    {{{0, 0}, {1, 0}, {2, 0}, {3, 0}}},
    {{{0, 0}, {0, 1}, {1, 0}, {1, 1}}},  // O
    {{{0, 0}, {0, 1}, {0, 2}, {1, 1}}},  // T
    {{{0, 1}, {1, 0}, {1, 1}, {2, 1}}},
    {{{0, 1}, {1, 0}, {1, 1}, {1, 2}}},
    {{{0, 0}, {1, 0}, {1, 1}, {2, 0}}},
    {{{0, 1}, {0, 2}, {1, 0}, {1, 1}}},  // S
    {{{0, 0}, {1, 0}, {1, 1}, {2, 1}}},
    {{{0, 0}, {0, 1}, {1, 1}, {1, 2}}},  // Z
    {{{0, 1}, {1, 0}, {1, 1}, {2, 0}}},
    {{{0, 0}, {1, 0}, {2, 0}, {2, 1}}},  // L
    {{{0, 0}, {0, 1}, {0, 2}, {1, 0}}},
    {{{0, 0}, {0, 1}, {1, 1}, {2, 1}}},
    {{{0, 2}, {1, 0}, {1, 1}, {1, 2}}},
    {{{0, 1}, {1, 1}, {2, 0}, {2, 1}}},  // J
    {{{0, 0}, {1, 0}, {1, 1}, {1, 2}}},
    {{{0, 0}, {0, 1}, {1, 0}, {2, 0}}},
    {{{0, 0}, {0, 1}, {0, 2}, {1, 2}}},
}};

// Portable uniform draws; std distributions are implementation-defined.
class Sampler {
public:
    explicit Sampler(std::uint64_t seed) : rng_(seed) {}
    double uniform() { return static_cast<double>(rng_() >> 11) * 0x1.0p-53; }
    float uniform(float lo, float hi) { return lo + static_cast<float>(uniform()) * (hi - lo); }
    int integer(int lo, int hi) {  // inclusive
        const auto span = static_cast<std::uint64_t>(hi - lo + 1);
        return lo + static_cast<int>(rng_() % span);
    }

private:
    std::mt19937_64 rng_;
};

std::uint8_t to_byte(float v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.f, 1.f) * 255.f));
}

struct TetrominoGeometry {
    int rows = 0;
    int cols = 0;
};

TetrominoGeometry tetromino_extent(std::uint32_t id) {
    TetrominoGeometry g;
    for (const auto& c : kTetrominoes[id]) {
        g.rows = std::max(g.rows, c[0] + 1);
        g.cols = std::max(g.cols, c[1] + 1);
    }
    return g;
}

// Pixel box (top-left) of a tetromino whose centre lies at (x, y).
std::array<int, 2> tetromino_origin(const ObjectFactors& o, const GeneratorPreset& p) {
    const auto g = tetromino_extent(o.shape_id);
    const int top = static_cast<int>(std::lround(o.y * p.height - 0.5f * g.rows * p.block_size));
    const int left = static_cast<int>(std::lround(o.x * p.width - 0.5f * g.cols * p.block_size));
    return {top, left};
}

bool tetromino_covers(const ObjectFactors& o, const GeneratorPreset& p, int i, int j) {
    const auto [top, left] = tetromino_origin(o, p);
    const int bi = i - top;
    const int bj = j - left;
    if (bi < 0 || bj < 0) return false;
    const int r = bi / p.block_size;
    const int c = bj / p.block_size;
    return std::any_of(kTetrominoes[o.shape_id].begin(), kTetrominoes[o.shape_id].end(),
                       [&](const auto& cell) { return cell[0] == r && cell[1] == c; });
}

bool sprite_covers(const ObjectFactors& o, const GeneratorPreset& p, int i, int j) {
    const float half = 0.5f * o.scale * static_cast<float>(p.height);
    const float px = (static_cast<float>(j) + 0.5f) - o.x * static_cast<float>(p.width);
    const float py = (static_cast<float>(i) + 0.5f) - o.y * static_cast<float>(p.height);
    const float c = std::cos(o.angle);
    const float s = std::sin(o.angle);
    const float u = (c * px + s * py) / half;
    const float v = (-s * px + c * py) / half;
    switch (o.shape_id) {
        case kSquare:
            return std::abs(u) <= 0.8f && std::abs(v) <= 0.8f;
        case kEllipse:
            return u * u + 4.f * v * v <= 1.f;
        case kTriangle:
            // Isosceles triangle with apex at v = -1 and base at v = 0.7.
            return v <= 0.7f && v >= -1.f && std::abs(u) <= 0.9f * (v + 1.f) / 1.7f;
        default:
            return false;
    }
}

bool covers(const ObjectFactors& o, const GeneratorPreset& p, int i, int j) {
    return p.shapes == ShapeKind::Tetromino ? tetromino_covers(o, p, i, j)
                                            : sprite_covers(o, p, i, j);
}

std::vector<std::uint8_t> coverage(const ObjectFactors& o, const GeneratorPreset& p) {
    std::vector<std::uint8_t> m(static_cast<std::size_t>(p.height) * p.width, 0);
    for (int i = 0; i < p.height; ++i)
        for (int j = 0; j < p.width; ++j)
            m[static_cast<std::size_t>(i) * p.width + j] = covers(o, p, i, j) ? 1 : 0;
    return m;
}

ObjectFactors sample_object(Sampler& rng, const GeneratorPreset& p) {
    ObjectFactors o;
    if (p.shapes == ShapeKind::Tetromino) {
        o.shape_id = static_cast<std::uint32_t>(rng.integer(0, kTetrominoCount - 1));
        const auto g = tetromino_extent(o.shape_id);
        o.scale = static_cast<float>(g.rows * p.block_size) / static_cast<float>(p.height);
        // Keep the whole piece inside the image, snapped to the pixel grid.
        const int h = g.rows * p.block_size;
        const int w = g.cols * p.block_size;
        const int top = rng.integer(0, p.height - h);
        const int left = rng.integer(0, p.width - w);
        o.y = (static_cast<float>(top) + 0.5f * h) / static_cast<float>(p.height);
        o.x = (static_cast<float>(left) + 0.5f * w) / static_cast<float>(p.width);
        o.angle = 0.f;
    } else {
        o.shape_id = static_cast<std::uint32_t>(rng.integer(0, 2));
        o.scale = rng.uniform(p.min_scale, p.max_scale);
        const float margin = 0.5f * o.scale;
        o.x = rng.uniform(margin, 1.f - margin);
        o.y = rng.uniform(margin, 1.f - margin);
        o.angle = rng.uniform(0.f, static_cast<float>(2.0 * std::numbers::pi));
        if (o.angle >= static_cast<float>(2.0 * std::numbers::pi)) o.angle = 0.f;
    }
    if (p.palette.empty()) {
        for (auto& c : o.color) c = rng.uniform(0.2f, 1.f);
    } else {
        o.color = p.palette[static_cast<std::size_t>(rng.integer(0, static_cast<int>(p.palette.size()) - 1))];
    }
    return o;
}

}  // namespace

std::vector<int> Scene::label_map() const {
    std::vector<int> labels(num_pixels(), 0);
    const std::size_t channels = num_objects() + 1;
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t p = 0; p < num_pixels(); ++p)
            if (true_masks[c * num_pixels() + p]) labels[p] = static_cast<int>(c);
    return labels;
}

double GeneratorPreset::max_object_extent() const {
    if (shapes == ShapeKind::Tetromino) return 4.0 * block_size;
    // Rotated sprites stay inside a circle of radius scale*H/2.
    return static_cast<double>(max_scale) * height;
}

void GeneratorPreset::validate() const {
    if (height < 1 || width < 1) throw ConfigError("preset '" + name + "': image size must be positive");
    if (min_objects < 0 || max_objects < min_objects)
        throw ConfigError("preset '" + name + "': invalid object-count range");
    if (max_object_extent() > static_cast<double>(std::min(height, width)))
        throw ConfigError("preset '" + name + "': max object extent exceeds image bounds");
    if (shapes == ShapeKind::Sprite && !(min_scale > 0.f && max_scale >= min_scale))
        throw ConfigError("preset '" + name + "': invalid sprite scale range");
    if (shapes == ShapeKind::Tetromino && block_size < 1)
        throw ConfigError("preset '" + name + "': block size must be positive");
}

GeneratorPreset tetromino_preset() {
    GeneratorPreset p;
    p.name = "tetromino";
    p.height = p.width = 32;
    p.shapes = ShapeKind::Tetromino;
    p.min_objects = p.max_objects = 3;
    p.allow_overlap = false;
    p.block_size = 4;
    p.palette = {{1.f, 0.f, 0.f}, {0.f, 1.f, 0.f}, {0.f, 0.f, 1.f},
                 {1.f, 1.f, 0.f}, {1.f, 0.f, 1.f}, {0.f, 1.f, 1.f}};
    p.background = {0.f, 0.f, 0.f};
    return p;
}

GeneratorPreset sprites_preset() {
    GeneratorPreset p;
    p.name = "sprites";
    p.height = p.width = 48;
    p.shapes = ShapeKind::Sprite;
    p.min_objects = 1;
    p.max_objects = 4;
    p.allow_overlap = true;
    p.min_scale = 0.2f;
    p.max_scale = 0.4f;
    p.random_gray_background = true;
    p.gray_lo = 0.f;
    p.gray_hi = 0.6f;
    return p;
}

GeneratorPreset preset_by_name(const std::string& name) {
    if (name == "tetromino") return tetromino_preset();
    if (name == "sprites") return sprites_preset();
    throw ConfigError("unknown generator preset '" + name + "'");
}

std::uint64_t scene_seed(std::uint64_t base_seed, std::uint64_t index) {
    // splitmix64 over (seed, index)
    std::uint64_t z = base_seed * 0x9E3779B97F4A7C15ULL + index + 0x632BE59BD9B4E019ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

Scene render_scene(const SceneFactors& factors, const GeneratorPreset& preset) {
    Scene s;
    s.height = preset.height;
    s.width = preset.width;
    s.factors = factors;
    const std::size_t n_pix = s.num_pixels();
    const std::size_t n_obj = factors.objects.size();

    std::vector<int> owner(n_pix, 0);
    for (std::size_t o = 0; o < n_obj; ++o) {
        const auto cov = coverage(factors.objects[o], preset);
        for (std::size_t p = 0; p < n_pix; ++p)
            if (cov[p]) owner[p] = static_cast<int>(o) + 1;
    }

    s.image.resize(n_pix * 3);
    s.true_masks.assign((n_obj + 1) * n_pix, 0);
    for (std::size_t p = 0; p < n_pix; ++p) {
        const int who = owner[p];
        const Rgb& c = who == 0 ? factors.background : factors.objects[who - 1].color;
        for (int ch = 0; ch < 3; ++ch) s.image[p * 3 + ch] = to_byte(c[ch]);
        s.true_masks[static_cast<std::size_t>(who) * n_pix + p] = 1;
    }
    return s;
}

Scene generate_scene(std::uint64_t seed, const GeneratorPreset& preset) {
    preset.validate();
    Sampler rng(seed);
    SceneFactors f;
    if (preset.random_gray_background) {
        const float g = rng.uniform(preset.gray_lo, preset.gray_hi);
        f.background = {g, g, g};
    } else {
        f.background = preset.background;
    }

    const int count = rng.integer(preset.min_objects, preset.max_objects);
    std::vector<std::uint8_t> occupied(static_cast<std::size_t>(preset.height) * preset.width, 0);
    for (int n = 0; n < count; ++n) {
        ObjectFactors o;
        bool placed = false;
        for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
            o = sample_object(rng, preset);
            if (preset.allow_overlap) {
                placed = true;
                break;
            }
            const auto cov = coverage(o, preset);
            bool clash = false;
            for (std::size_t p = 0; p < cov.size() && !clash; ++p) clash = cov[p] && occupied[p];
            if (!clash) {
                for (std::size_t p = 0; p < cov.size(); ++p) occupied[p] |= cov[p];
                placed = true;
            }
        }
        if (placed) f.objects.push_back(o);
    }
    // Objects are sampled in random order, so list order is a random draw order.
    return render_scene(f, preset);
}

// Dataset I/O ------------------------------------------------------------------

namespace {

void put_u32(std::vector<char>& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
void put_u64(std::vector<char>& b, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
void put_f32(std::vector<char>& b, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(b, bits);
}

class ByteCursor {
public:
    ByteCursor(const char* data, std::size_t size) : data_(data), size_(size) {}
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }
    float f32() {
        const std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    const char* take(std::size_t n) {
        need(n);
        const char* p = data_ + pos_;
        pos_ += n;
        return p;
    }

private:
    void need(std::size_t n) const {
        if (pos_ + n > size_) throw TruncatedError("dataset record is truncated");
    }
    const char* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

std::size_t packed_mask_bytes(std::size_t n_pix) { return (n_pix + 7) / 8; }

std::vector<char> encode_scene(const Scene& s) {
    std::vector<char> b;
    const std::size_t n_pix = s.num_pixels();
    const std::size_t n_obj = s.num_objects();
    put_u32(b, static_cast<std::uint32_t>(n_obj));
    b.insert(b.end(), s.image.begin(), s.image.end());
    for (std::size_t c = 0; c <= n_obj; ++c) {
        std::vector<char> packed(packed_mask_bytes(n_pix), 0);
        for (std::size_t p = 0; p < n_pix; ++p)
            if (s.true_masks[c * n_pix + p]) packed[p / 8] = static_cast<char>(packed[p / 8] | (1 << (p % 8)));
        b.insert(b.end(), packed.begin(), packed.end());
    }
    for (float v : s.factors.background) put_f32(b, v);
    for (const auto& o : s.factors.objects) {
        put_u32(b, o.shape_id);
        for (float v : o.color) put_f32(b, v);
        put_f32(b, o.scale);
        put_f32(b, o.x);
        put_f32(b, o.y);
        put_f32(b, o.angle);
    }
    return b;
}

Scene decode_scene(const char* data, std::size_t size, int height, int width) {
    ByteCursor cur(data, size);
    Scene s;
    s.height = height;
    s.width = width;
    const std::size_t n_pix = s.num_pixels();
    const std::uint32_t n_obj = cur.u32();
    const char* img = cur.take(n_pix * 3);
    s.image.assign(reinterpret_cast<const std::uint8_t*>(img), reinterpret_cast<const std::uint8_t*>(img) + n_pix * 3);
    s.true_masks.assign((n_obj + 1) * n_pix, 0);
    for (std::size_t c = 0; c <= n_obj; ++c) {
        const char* packed = cur.take(packed_mask_bytes(n_pix));
        for (std::size_t p = 0; p < n_pix; ++p)
            s.true_masks[c * n_pix + p] = (static_cast<unsigned char>(packed[p / 8]) >> (p % 8)) & 1;
    }
    for (auto& v : s.factors.background) v = cur.f32();
    s.factors.objects.resize(n_obj);
    for (auto& o : s.factors.objects) {
        o.shape_id = cur.u32();
        for (auto& v : o.color) v = cur.f32();
        o.scale = cur.f32();
        o.x = cur.f32();
        o.y = cur.f32();
        o.angle = cur.f32();
    }
    return s;
}

std::vector<char> read_range(const std::filesystem::path& path, std::uint64_t offset, std::uint64_t size) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open dataset '" + path.string() + "'");
    in.seekg(static_cast<std::streamoff>(offset));
    std::vector<char> buf(size);
    in.read(buf.data(), static_cast<std::streamsize>(size));
    if (static_cast<std::uint64_t>(in.gcount()) != size) throw TruncatedError("dataset file is truncated");
    return buf;
}

}  // namespace

void write_dataset(const std::vector<Scene>& scenes, const std::filesystem::path& path,
                   std::uint32_t max_objects, std::uint64_t seed, const std::string& preset) {
    const int h = scenes.empty() ? 0 : scenes.front().height;
    const int w = scenes.empty() ? 0 : scenes.front().width;
    for (const auto& s : scenes) {
        if (s.height != h || s.width != w) throw ShapeError("all scenes in a dataset must share H and W");
        if (s.num_objects() > max_objects) throw ShapeError("scene exceeds max_objects");
    }
    if (preset.size() >= kPresetNameBytes) throw ConfigError("preset name too long for dataset header");

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write dataset '" + path.string() + "'");

    std::vector<char> header;
    header.insert(header.end(), kDatasetMagic.begin(), kDatasetMagic.end());
    put_u32(header, kDatasetVersion);
    put_u32(header, static_cast<std::uint32_t>(scenes.size()));
    put_u32(header, static_cast<std::uint32_t>(h));
    put_u32(header, static_cast<std::uint32_t>(w));
    put_u32(header, max_objects);
    put_u32(header, 0);  // reserved
    put_u64(header, seed);
    std::array<char, kPresetNameBytes> name{};
    std::copy(preset.begin(), preset.end(), name.begin());
    header.insert(header.end(), name.begin(), name.end());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));

    std::vector<std::uint64_t> offsets;
    std::uint64_t pos = kHeaderBytes;
    for (const auto& s : scenes) {
        const auto rec = encode_scene(s);
        offsets.push_back(pos);
        out.write(rec.data(), static_cast<std::streamsize>(rec.size()));
        pos += rec.size();
    }
    std::vector<char> tail;
    for (auto o : offsets) put_u64(tail, o);
    put_u64(tail, pos);
    tail.insert(tail.end(), kIndexMagic.begin(), kIndexMagic.end());
    out.write(tail.data(), static_cast<std::streamsize>(tail.size()));
    if (!out) throw IoError("failed writing dataset '" + path.string() + "'");
}

DatasetReader::DatasetReader(const std::filesystem::path& path) : path_(path) {
    std::error_code ec;
    const auto file_size = std::filesystem::file_size(path, ec);
    if (ec) throw IoError("cannot open dataset '" + path.string() + "'");
    if (file_size < kHeaderBytes) throw TruncatedError("dataset header is truncated");

    const auto head = read_range(path, 0, kHeaderBytes);
    if (!std::equal(kDatasetMagic.begin(), kDatasetMagic.end(), head.begin()))
        throw FormatError("bad dataset magic");
    ByteCursor cur(head.data() + 8, kHeaderBytes - 8);
    header_.version = cur.u32();
    if (header_.version != kDatasetVersion)
        throw FormatError("dataset version " + std::to_string(header_.version) + " is not supported");
    header_.scene_count = cur.u32();
    header_.height = cur.u32();
    header_.width = cur.u32();
    header_.max_objects = cur.u32();
    cur.u32();
    header_.seed = cur.u64();
    const char* name = cur.take(kPresetNameBytes);
    header_.preset.assign(name, strnlen(name, kPresetNameBytes));

    const std::uint64_t index_bytes = 8ULL * header_.scene_count + 16;
    if (file_size < kHeaderBytes + index_bytes) throw TruncatedError("dataset payload is truncated");
    const auto tail = read_range(path, file_size - 16, 16);
    if (!std::equal(kIndexMagic.begin(), kIndexMagic.end(), tail.begin() + 8))
        throw TruncatedError("dataset index is missing; file is truncated");
    ByteCursor tcur(tail.data(), 8);
    payload_end_ = tcur.u64();
    if (payload_end_ + index_bytes != file_size)
        throw TruncatedError("dataset holds fewer records than its header declares");

    const auto index = read_range(path, payload_end_, 8ULL * header_.scene_count);
    ByteCursor icur(index.data(), index.size());
    offsets_.resize(header_.scene_count);
    std::uint64_t prev = kHeaderBytes;
    for (auto& o : offsets_) {
        o = icur.u64();
        if (o < prev || o >= payload_end_) throw TruncatedError("dataset index points outside the payload");
        prev = o;
    }
}

Scene DatasetReader::at(std::size_t index) const {
    if (index >= offsets_.size())
        throw IndexError("scene index " + std::to_string(index) + " out of range (count " +
                         std::to_string(offsets_.size()) + ")");
    const std::uint64_t end = index + 1 < offsets_.size() ? offsets_[index + 1] : payload_end_;
    const auto rec = read_range(path_, offsets_[index], end - offsets_[index]);
    return decode_scene(rec.data(), rec.size(), static_cast<int>(header_.height), static_cast<int>(header_.width));
}

Scene DatasetView::at(std::size_t i) const {
    if (i >= count_) throw IndexError("view index " + std::to_string(i) + " out of range");
    return reader_->at(begin_ + i);
}

std::pair<DatasetView, DatasetView> split_dataset(const DatasetReader& reader, std::size_t n_train,
                                                  std::size_t n_test) {
    if (n_train + n_test > reader.size())
        throw IndexError("insufficient scenes: requested " + std::to_string(n_train + n_test) + ", have " +
                         std::to_string(reader.size()));
    return {DatasetView(&reader, 0, n_train), DatasetView(&reader, n_train, n_test)};
}

}  // namespace emorl
