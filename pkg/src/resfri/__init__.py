"""ResFRI / Split-ResFRI inception blocks and the GoogLeNet-layout backbones built from them."""

__version__ = "0.1.0"
