#!/usr/bin/env python3
"""Per-layer parameter count of the relighting network, summed by hand.

Used to freeze the expected counts in test_model.cpp. Run:
    python3 tests/oracles/param_count.py
"""


def conv(cin, cout, k):
    return cout * cin * k * k + cout


def deconv(cin, cout, k):
    return cin * cout * k * k + cout


def count(input_size=256, base=32, stages=4, bottleneck=256, lighting=128, res_blocks=4, probe=64):
    width = [base * 2**k for k in range(stages)] + [bottleneck]
    total = 0
    # encoder: dual conv (two 3x3 convs, each with an instance-norm scale and shift), then down-projection
    for k in range(stages):
        cin = 3 if k == 0 else width[k]
        c = width[k]
        total += conv(cin, c, 3) + 2 * c + conv(c, c, 3) + 2 * c
        total += conv(c, width[k + 1], 4) + deconv(width[k + 1], c, 4) + conv(c, width[k + 1], 4)
    total += conv(bottleneck, bottleneck, 3)
    total += res_blocks * 2 * conv(bottleneck, bottleneck, 3)
    # decoder: up-projection, concat skip, dual conv without normalization
    for k in reversed(range(stages)):
        total += deconv(width[k + 1], width[k], 4) + conv(width[k], width[k + 1], 4) + deconv(width[k + 1], width[k], 4)
        total += conv(2 * width[k], width[k], 3) + conv(width[k], width[k], 3)
    total += conv(base, 3, 3)
    # probe branches: 8x8 core, one stride-2 level per doubling
    levels = 0
    s = probe
    while s > 8:
        s //= 2
        levels += 1
    total += conv(3, base, 3) + levels * conv(base, base, 4) + conv(base, lighting, 1)
    total += lighting * base * 64 + base * 64 + levels * deconv(base, base, 4) + conv(base, 3, 3)
    return total


if __name__ == "__main__":
    print("default", count())
    print("toy", count(input_size=128, base=8, stages=3, bottleneck=64, lighting=16, res_blocks=2, probe=64))
    print("mini", count(input_size=32, base=4, stages=2, bottleneck=16, lighting=8, res_blocks=1, probe=16))
