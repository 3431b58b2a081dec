#!/usr/bin/env python3
"""Print parameter and FLOPs accounting for the standard reference configs."""

from moeup.accounting import count_params, flops_forward, training_flops
from moeup.config import ModelConfig


def cfg(d_h, d_f, n_l, n_h, n_q, v, n=0, k=0):
    return ModelConfig(hidden_size=d_h, intermediate_size=d_f, num_layers=n_l,
                       num_heads=n_h, num_query_groups=n_q, head_dim=d_h // n_h,
                       vocab_size=v, num_experts=n, top_k=k, seq_len=4096)


ROWS = [
    ("dense 152M", cfg(512, 2048, 12, 8, 8, 99_574)),
    ("dense 1.5B", cfg(2048, 7168, 24, 16, 8, 48_586)),
    ("dense 3.7B", cfg(3072, 8192, 28, 24, 24, 99_574)),
    ("dense 13B", cfg(5120, 13_824, 40, 40, 40, 99_574)),
    ("moe 8x152M", cfg(512, 2048, 12, 8, 8, 99_574, n=8, k=2)),
    ("moe 8x1.5B", cfg(2048, 7168, 24, 16, 8, 48_586, n=8, k=2)),
    ("moe 8x3.7B", cfg(3072, 8192, 28, 24, 24, 99_574, n=8, k=2)),
]

BUDGETS = {"dense 152M": 1_000e9, "moe 8x152M": 500e9, "moe 8x3.7B": 500e9}


def main() -> None:
    print(f"{'model':<12} {'total':>16} {'active':>16} {'fwd FLOPs/token':>16} "
          f"{'train FLOPs':>14}")
    for name, config in ROWS:
        params = count_params(config)
        per_token = flops_forward(config).total_forward // config.seq_len
        budget = BUDGETS.get(name)
        total_training = f"{training_flops(config, budget):.3e}" if budget else "-"
        print(f"{name:<12} {params.total:>16,} {params.active:>16,} "
              f"{per_token:>16,} {total_training:>14}")


if __name__ == "__main__":
    main()
