#!/usr/bin/env python3

import unittest
import sys
import os
import json
import tempfile

import numpy as np

# Add src to path
sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from errors import DataError, SchemaVersionError
from geom import exp_tangent
from mapio import (SCHEMA_VERSION, decode_array, decode_pose, dump_document, encode_array, encode_pose,
                   file_digest, load_document)


class TestCodec(unittest.TestCase):
    def test_arrays_keep_dtype_and_shape(self):
        rng = np.random.default_rng(0)
        for arr in (rng.standard_normal((5, 64)).astype(np.float32), rng.integers(0, 2, (3, 32)).astype(np.uint8),
                    np.arange(6, dtype=np.int64).reshape(2, 3), np.zeros((0, 128))):
            out = decode_array(json.loads(json.dumps(encode_array(arr))))
            self.assertEqual(out.dtype, arr.dtype)
            np.testing.assert_array_equal(out, arr)

    def test_pose(self):
        p = exp_tangent([0.3, -0.2, 1.1, 1.0, 2.0, -0.5])
        out = decode_pose(json.loads(json.dumps(encode_pose(p))))
        np.testing.assert_array_equal(out.rotation, p.rotation)
        np.testing.assert_array_equal(out.translation, p.translation)

    def test_pose_is_stable_over_repeated_passes(self):
        p = exp_tangent([2.9, 0.4, -1.3, -4.0, 0.25, 7.5])
        once = encode_pose(decode_pose(encode_pose(p)))
        self.assertEqual(once, encode_pose(p))


class TestDocuments(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "sub", "doc.json")

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip(self):
        dump_document("world", {"seed": 3}, self.path)
        doc = load_document("world", self.path)
        self.assertEqual(doc["seed"], 3)
        self.assertEqual(doc["version"], SCHEMA_VERSION)

    def test_equal_content_gives_equal_bytes(self):
        dump_document("map", {"b": 1, "a": [1, 2]}, self.path)
        first = file_digest(self.path)
        dump_document("map", {"a": [1, 2], "b": 1}, self.path)
        self.assertEqual(file_digest(self.path), first)

    def test_wrong_kind(self):
        dump_document("session", {}, self.path)
        with self.assertRaises(SchemaVersionError):
            load_document("map", self.path)

    def test_future_version(self):
        dump_document("map", {}, self.path)
        with open(self.path) as f:
            doc = json.load(f)
        doc["version"] = SCHEMA_VERSION + 1
        with open(self.path, "w") as f:
            json.dump(doc, f)
        with self.assertRaises(SchemaVersionError):
            load_document("map", self.path)

    def test_missing_and_corrupt_files(self):
        with self.assertRaises(DataError):
            load_document("map", self.path)
        os.makedirs(os.path.dirname(self.path))
        with open(self.path, "w") as f:
            f.write("{not json")
        with self.assertRaises(DataError):
            load_document("map", self.path)


if __name__ == '__main__':
    unittest.main()
