"""
DeblurNet: three-level wavelet encoder/decoder run at a fixed low resolution.
"""
import numpy as np

from d2hnet import config
from d2hnet.core.ops import concat_channels, dwt2, idwt2, leaky_relu
from d2hnet.core.tensor import GradNode, as_node
from d2hnet.nn.layers import Conv2d, Module, ResidualBlock
from d2hnet.utils.validators import validate_divisible, validate_same_shape


class DeblurNet(Module):
    """Maps (long, short) inputs to a deblurred estimate t of the same size.

    Widths are base, 2*base and 4*base across the three levels. Haar DWT
    halves the resolution between levels and IDWT restores it in the
    decoder; skip features are concatenated and reduced by 1x1 convs.
    """

    DIVISOR = 4

    def __init__(
        self,
        rng: np.random.Generator,
        base: int = config.DEBLUR_BASE_WIDTH,
        residual_layers: int = config.RESIDUAL_LAYERS,
        slope: float = config.LEAKY_SLOPE,
        dtype=np.float32,
    ):
        super().__init__()
        self.slope = slope
        w1, w2, w3 = base, 2 * base, 4 * base

        def conv(name, cin, cout, k=3):
            return self.add_module(name, Conv2d(cin, cout, k, rng, slope=slope, dtype=dtype))

        self.head1 = conv("head1", 6, w1)
        self.head2 = conv("head2", w1, w1)
        self.enc2a = conv("enc2a", 4 * w1, w2)
        self.enc2b = conv("enc2b", w2, w2)
        self.enc3 = conv("enc3", 4 * w2, w3)
        self.bottleneck = [
            self.add_module(f"bottleneck{i}", ResidualBlock(w3, rng, residual_layers, slope, dtype))
            for i in range(2)
        ]
        self.up3 = conv("up3", w3, 4 * w2)
        self.fuse2 = conv("fuse2", 2 * w2, w2, k=1)
        self.dec2 = conv("dec2", w2, w2)
        self.up2 = conv("up2", w2, 4 * w1)
        self.fuse1 = conv("fuse1", 2 * w1, w1, k=1)
        self.tail = [
            self.add_module(f"tail{i}", ResidualBlock(w1, rng, residual_layers, slope, dtype))
            for i in range(2)
        ]
        self.out = conv("out", w1, 3)

    def _act(self, v: GradNode) -> GradNode:
        return leaky_relu(v, self.slope)

    def __call__(self, long_img, short_img) -> GradNode:
        long_img = as_node(long_img, "deblur long input")
        short_img = as_node(short_img, "deblur short input")
        validate_same_shape(long_img.shape, short_img.shape, "DeblurNet inputs")
        validate_divisible(long_img.shape[2], long_img.shape[3], self.DIVISOR, "DeblurNet input")
        act = self._act

        x = concat_channels(long_img, short_img)
        e1 = act(self.head2(act(self.head1(x))))
        e2 = act(self.enc2b(act(self.enc2a(dwt2(e1)))))
        b = act(self.enc3(dwt2(e2)))
        for block in self.bottleneck:
            b = block(b)

        d2 = idwt2(self.up3(b))
        d2 = act(self.fuse2(concat_channels(d2, e2)))
        d2 = act(self.dec2(d2))
        d1 = idwt2(self.up2(d2))
        d1 = act(self.fuse1(concat_channels(d1, e1)))
        for block in self.tail:
            d1 = block(d1)
        return self.out(d1)
