#include "neuralbayes/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>

#include "neuralbayes/errors.hpp"

namespace nb {

namespace {

using json = nlohmann::ordered_json;

template <class... Ts>
struct Overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

void put_tensor(std::ofstream& out, const Tensor& t) {
    for (double v : t.values()) {
        std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
        if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
        char buf[8];
        std::memcpy(buf, &bits, 8);
        out.write(buf, 8);
    }
}

class Reader {
public:
    explicit Reader(std::vector<char> buf) : buf_(std::move(buf)) {}

    Tensor take(const Shape& shape) {
        Tensor t(shape);
        const std::size_t bytes = t.size() * 8;
        if (pos_ + bytes > buf_.size()) throw FormatError("checkpoint binary truncated at byte " + std::to_string(buf_.size()));
        for (std::size_t i = 0; i < t.size(); ++i) {
            std::uint64_t bits;
            std::memcpy(&bits, buf_.data() + pos_ + 8 * i, 8);
            if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
            t[i] = std::bit_cast<double>(bits);
        }
        pos_ += bytes;
        return t;
    }
    bool done() const { return pos_ == buf_.size(); }

private:
    std::vector<char> buf_;
    std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::string& prefix, const Network& net, const CheckpointMeta& meta) {
    json m;
    m["format"] = "neuralbayes-checkpoint-1";
    m["seed"] = meta.seed;
    m["sample_shape"] = net.sample_shape();
    m["taps"] = net.taps();
    json layers = json::array();
    std::ofstream bin(prefix + ".bin", std::ios::binary);
    if (!bin) throw FormatError("cannot write " + prefix + ".bin");
    for (const auto& layer : net.layers()) {
        json l;
        std::visit(Overloaded{
                       [&](const DenseLayer& d) {
                           l["type"] = "dense";
                           l["weight"] = d.weight.value.shape();
                           put_tensor(bin, d.weight.value);
                           put_tensor(bin, d.bias.value);
                       },
                       [&](const Conv2dLayer& c) {
                           l["type"] = "conv2d";
                           l["weight"] = c.kernels.value.shape();
                           l["stride"] = c.stride;
                           l["padding"] = c.padding;
                           put_tensor(bin, c.kernels.value);
                           put_tensor(bin, c.bias.value);
                       },
                       [&](const BatchNormLayer& b) {
                           l["type"] = "batchnorm";
                           l["features"] = b.scale.value.size();
                           l["momentum"] = b.momentum;
                           l["var_floor"] = b.var_floor;
                           put_tensor(bin, b.scale.value);
                           put_tensor(bin, b.shift.value);
                           put_tensor(bin, b.running_mean);
                           put_tensor(bin, b.running_var);
                       },
                       [&](const ReluLayer&) { l["type"] = "relu"; },
                       [&](const PoolLayer& p) {
                           l["type"] = "pool";
                           l["kind"] = p.kind == PoolLayer::Kind::Max ? "max" : "avg";
                           l["kernel"] = p.kernel;
                           l["stride"] = p.stride;
                           l["global"] = p.global;
                       },
                       [&](const FlattenLayer&) { l["type"] = "flatten"; },
                       [&](const SoftmaxLayer&) { l["type"] = "softmax"; },
                   },
                   layer);
        layers.push_back(std::move(l));
    }
    m["layers"] = std::move(layers);
    m["meta"] = json::parse(meta.extra_json);
    bin.close();
    std::ofstream js(prefix + ".json");
    if (!js) throw FormatError("cannot write " + prefix + ".json");
    js << m.dump(2) << "\n";
}

Network load_checkpoint(const std::string& prefix, CheckpointMeta* meta) {
    std::ifstream js(prefix + ".json");
    if (!js) throw FormatError("cannot open " + prefix + ".json");
    std::ifstream binf(prefix + ".bin", std::ios::binary);
    if (!binf) throw FormatError("cannot open " + prefix + ".bin");
    Reader rd{std::vector<char>{std::istreambuf_iterator<char>(binf), std::istreambuf_iterator<char>()}};
    try {
        const json m = json::parse(js);
        if (m.at("format") != "neuralbayes-checkpoint-1") throw FormatError("unknown checkpoint format");
        std::vector<Layer> layers;
        for (const auto& l : m.at("layers")) {
            const std::string type = l.at("type");
            if (type == "dense") {
                const Shape ws = l.at("weight").get<Shape>();
                DenseLayer d;
                d.weight.value = rd.take(ws);
                d.bias.value = rd.take(Shape{ws.at(0)});
                layers.emplace_back(std::move(d));
            } else if (type == "conv2d") {
                const Shape ws = l.at("weight").get<Shape>();
                Conv2dLayer c;
                c.kernels.value = rd.take(ws);
                c.bias.value = rd.take(Shape{ws.at(0)});
                c.stride = l.at("stride");
                c.padding = l.at("padding");
                layers.emplace_back(std::move(c));
            } else if (type == "batchnorm") {
                const std::size_t f = l.at("features");
                BatchNormLayer b;
                b.momentum = l.at("momentum");
                b.var_floor = l.at("var_floor");
                b.scale.value = rd.take(Shape{f});
                b.shift.value = rd.take(Shape{f});
                b.running_mean = rd.take(Shape{f});
                b.running_var = rd.take(Shape{f});
                layers.emplace_back(std::move(b));
            } else if (type == "relu") {
                layers.emplace_back(ReluLayer{});
            } else if (type == "pool") {
                PoolLayer p;
                p.kind = l.at("kind") == "max" ? PoolLayer::Kind::Max : PoolLayer::Kind::Avg;
                p.kernel = l.at("kernel");
                p.stride = l.at("stride");
                p.global = l.at("global");
                layers.emplace_back(p);
            } else if (type == "flatten") {
                layers.emplace_back(FlattenLayer{});
            } else if (type == "softmax") {
                layers.emplace_back(SoftmaxLayer{});
            } else {
                throw FormatError("unknown layer type '" + type + "'");
            }
        }
        if (!rd.done()) throw FormatError(prefix + ".bin has trailing bytes");
        if (meta) {
            meta->seed = m.at("seed");
            meta->extra_json = m.at("meta").dump();
        }
        return Network(std::move(layers), m.at("taps").get<std::vector<std::size_t>>(),
                       m.at("sample_shape").get<Shape>());
    } catch (const json::exception& e) {
        throw FormatError(prefix + ".json: " + e.what());
    }
}

}  // namespace nb
