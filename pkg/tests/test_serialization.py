# tests/test_serialization.py
import os
import struct
import tempfile
import unittest

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from atvc_lab import atvc, nn
from atvc_lab.atvc import GaussianMessage, ModelConfig
from atvc_lab.errors import ContractError
from atvc_lab.serialization import (FORMAT_VERSION, MAGIC, decode_arrays, decode_message, encode_arrays,
                                    encode_message, load_checkpoint, read_arrays, save_checkpoint)


class TestSerialization(unittest.TestCase):

    def setUp(self):
        self.tmp_dir = tempfile.mkdtemp()
        self.checkpoint_file = os.path.join(self.tmp_dir, "checkpoint.atvc")

    def tearDown(self):
        # Clean up created files after each test method
        if os.path.exists(self.checkpoint_file):
            os.remove(self.checkpoint_file)
        os.rmdir(self.tmp_dir)

    def test_save_and_load_checkpoint(self):
        store = atvc.init_params(ModelConfig(latent_dim=3, encoder_hidden=5, head_hidden=5, attention_dim=2),
                                 d=2, B=5, seed=0)
        nn.backward(nn.reduce_sum(nn.square(store["policy/out/W"])))
        nn.adam_step(store, lr=0.01)
        save_checkpoint(store, {"iteration": 7, "kl_coeff": 0.4}, self.checkpoint_file)
        self.assertTrue(os.path.exists(self.checkpoint_file))

        loaded, meta = load_checkpoint(self.checkpoint_file)
        self.assertEqual(meta, {"iteration": 7.0, "kl_coeff": 0.4})
        self.assertEqual(list(loaded), list(store))
        self.assertEqual(loaded.step_count, 1)
        for name, tensor in store.items():
            self.assertEqual(loaded[name].data.tobytes(), tensor.data.tobytes())
            self.assertEqual(loaded._second_moment[name].tobytes(), store._second_moment[name].tobytes())

    def test_header_layout(self):
        blob = encode_arrays({"w": np.array([[1.0, 2.0]])})
        self.assertEqual(blob[:8], MAGIC)
        self.assertEqual(struct.unpack_from("<II", blob, 8), (FORMAT_VERSION, 1))
        self.assertEqual(struct.unpack_from("<I", blob, 16), (1,))
        self.assertEqual(blob[20:21], b"w")
        self.assertEqual(struct.unpack_from("<I2Q", blob, 21), (2, 1, 2))
        self.assertEqual(struct.unpack_from("<2d", blob, 41), (1.0, 2.0))
        self.assertEqual(len(blob), 57)

    def test_rejects_foreign_or_damaged_blobs(self):
        blob = encode_arrays({"w": np.ones(3)})
        with self.assertRaises(ContractError):
            decode_arrays(b"NOTACKPT" + blob[8:])
        with self.assertRaises(ContractError):
            decode_arrays(blob[:8] + struct.pack("<II", FORMAT_VERSION + 1, 1) + blob[16:])
        with self.assertRaises(ContractError):
            decode_arrays(blob + b"\x00")

    def test_load_checkpoint_file_not_found(self):
        with self.assertRaises(FileNotFoundError):
            read_arrays(os.path.join(self.tmp_dir, "missing.atvc"))

    def test_message_round_trip(self):
        message = GaussianMessage(2, np.array([0.5, -1.25, 3.0]), np.array([0.1, 2.0, 1e-4]))
        decoded = decode_message(encode_message(message))
        self.assertEqual(decoded.sender_id, 2)
        self.assertEqual(decoded.mu.tobytes(), message.mu.tobytes())
        self.assertEqual(decoded.sigma.tobytes(), message.sigma.tobytes())

    @settings(max_examples=50, deadline=None)
    @given(st.dictionaries(st.text(min_size=1, max_size=12),
                           arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=4),
                                  elements=st.floats(allow_nan=False, width=64)),
                           max_size=4))
    def test_round_trip_is_bit_exact(self, named_arrays):
        decoded = decode_arrays(encode_arrays(named_arrays))
        self.assertEqual(list(decoded), list(named_arrays))
        for name, value in named_arrays.items():
            self.assertEqual(decoded[name].shape, value.shape)
            self.assertEqual(decoded[name].tobytes(), value.tobytes())


if __name__ == '__main__':
    unittest.main()
