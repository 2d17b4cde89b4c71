#pragma once

#include <memory>
#include <optional>
#include <string>

#include "ckm/layers.hpp"
#include "ckm/tensor.hpp"

namespace ckm {

// Two 3x3 convolutions with a 1x1 projection shortcut when the channel count
// changes; rectifier after the first convolution and after the residual add.
class ResidualBlock {
public:
    ResidualBlock(ParamStore& store, const std::string& name, std::size_t c_in, std::size_t c_out,
                  Rng& rng)
        : conv_a_(store, name + ".conv_a", c_in, c_out, 3, 1, rng),
          conv_b_(store, name + ".conv_b", c_out, c_out, 3, 1, rng) {
        if (c_in != c_out) proj_.emplace(store, name + ".proj", c_in, c_out, 1, 0, rng);
    }

    Tensor forward(ParamStore& store, const Tensor& input) {
        Tensor mid = relu_a_.forward(conv_a_.forward(store, input));
        Tensor main = conv_b_.forward(store, mid);
        Tensor shortcut = proj_ ? proj_->forward(store, input) : input;
        for (std::size_t i = 0; i < main.numel(); ++i) main[i] += shortcut[i];
        return relu_out_.forward(main);
    }

    Tensor backward(ParamStore& store, const Tensor& upstream) {
        Tensor d_sum = relu_out_.backward(upstream);
        Tensor d_input = conv_a_.backward(store, relu_a_.backward(conv_b_.backward(store, d_sum)));
        if (proj_) {
            Tensor d_short = proj_->backward(store, d_sum);
            for (std::size_t i = 0; i < d_input.numel(); ++i) d_input[i] += d_short[i];
        } else {
            for (std::size_t i = 0; i < d_input.numel(); ++i) d_input[i] += d_sum[i];
        }
        return d_input;
    }

private:
    Conv2d conv_a_;
    Conv2d conv_b_;
    std::optional<Conv2d> proj_;
    Relu relu_a_;
    Relu relu_out_;
};

enum class EncoderVariant { Ckan, Cmlp };

struct EncoderConfig {
    EncoderVariant variant = EncoderVariant::Ckan;
    std::size_t in_channels = 5;

    std::size_t out_channels() const { return variant == EncoderVariant::Ckan ? 64 : 128; }
    static constexpr std::size_t downsample = 8;
};

// CNN environmental feature encoder. The padding-2 second convolution grows
// the spatial size by 2; a symmetric crop restores it so that three poolings
// give exactly /8.
class Encoder {
public:
    Encoder(ParamStore& store, const EncoderConfig& cfg, Rng& rng)
        : cfg_(cfg),
          conv1_(store, "enc.conv1", cfg.in_channels, 16, 5, 2, rng),
          res1_(store, "enc.res1", 16, 32, rng),
          conv2_(store, "enc.conv2", 32, 64, 3, 2, rng),
          crop2_(1),
          res2_(store, "enc.res2", 64, 128, rng),
          conv3_(store, "enc.conv3", 128, cfg.out_channels(), 3, 1, rng),
          res3_(store, "enc.res3", cfg.out_channels(), cfg.out_channels(), rng) {}

    const EncoderConfig& config() const { return cfg_; }

    Tensor forward(ParamStore& store, const Tensor& stack) {
        if (stack.shape.size() != 3 || stack.shape[0] != cfg_.in_channels)
            throw std::invalid_argument("encoder: bad input shape");
        if (stack.shape[1] % EncoderConfig::downsample != 0 ||
            stack.shape[2] % EncoderConfig::downsample != 0)
            throw std::invalid_argument("encoder: spatial size must be divisible by 8");
        Tensor x = relu1_.forward(conv1_.forward(store, stack));
        x = pool1_.forward(res1_.forward(store, x));
        x = crop2_.forward(relu2_.forward(conv2_.forward(store, x)));
        x = pool2_.forward(res2_.forward(store, x));
        x = relu3_.forward(conv3_.forward(store, x));
        x = pool3_.forward(res3_.forward(store, x));
        return x;
    }

    Tensor backward(ParamStore& store, const Tensor& upstream) {
        Tensor d = res3_.backward(store, pool3_.backward(upstream));
        d = conv3_.backward(store, relu3_.backward(d));
        d = res2_.backward(store, pool2_.backward(d));
        d = conv2_.backward(store, relu2_.backward(crop2_.backward(d)));
        d = res1_.backward(store, pool1_.backward(d));
        return conv1_.backward(store, relu1_.backward(d));
    }

private:
    EncoderConfig cfg_;
    Conv2d conv1_;
    Relu relu1_;
    ResidualBlock res1_;
    MaxPool2 pool1_;
    Conv2d conv2_;
    Relu relu2_;
    Crop crop2_;
    ResidualBlock res2_;
    MaxPool2 pool2_;
    Conv2d conv3_;
    Relu relu3_;
    ResidualBlock res3_;
    MaxPool2 pool3_;
};

}  // namespace ckm
