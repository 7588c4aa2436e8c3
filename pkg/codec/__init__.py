"""Lossless coding of sparse quantized weight tensors."""

from codec.arithmetic import arithmetic_decode_mask
from codec.arithmetic import arithmetic_encode_mask
from codec.container import CompressedTensor
from codec.container import compress_network
from codec.container import decompress_network
from codec.container import format_report
from codec.container import verify_container
from codec.golomb import golomb_rice_decode
from codec.golomb import golomb_rice_encode
from codec.golomb import rle_decode_mask
from codec.golomb import rle_encode_mask
