"""温度場逆解析ユーティリティのコアパッケージ。"""

__all__ = [
    "bootstrap",
    "config",
    "diffnet",
    "domain",
    "errors",
    "evaluation",
    "experiment",
    "fd_system",
    "inversion",
    "placement",
    "repository",
    "sampling",
]
