import math

import numpy as np
import pytest

from diffbev.config import ConfigError, config_to_text, default_config, load_config
from diffbev.data import (
    KittiLabel,
    LabelFormatError,
    RigidTransform,
    SyntheticConfig,
    box_to_kitti_label,
    format_kitti_labels,
    generate_synthetic_scene,
    kitti_to_scene_boxes,
    label_difficulty,
    list_scene_ids,
    load_scene,
    parse_kitti_labels,
    save_scene,
)
from diffbev.geometry import Box3D, count_points_in_box, rotated_iou_matrix

CAR_LINE = "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59"


class TestParse:
    def test_reference_line(self):
        labels = parse_kitti_labels(CAR_LINE)
        assert len(labels) == 1
        lb = labels[0]
        assert lb.type == "Car"
        assert lb.truncated == 0.0
        assert lb.occluded == 0
        assert lb.alpha == -1.58
        assert lb.bbox == (587.01, 173.33, 614.12, 200.12)
        assert lb.dimensions == (1.65, 1.67, 3.64)  # (h, w, l): l = 3.64
        assert lb.location == (-0.65, 1.71, 46.70)
        assert lb.rotation_y == -1.59
        assert lb.score is None

    def test_empty_file(self):
        assert parse_kitti_labels("") == []
        assert parse_kitti_labels("\n\n") == []

    def test_wrong_field_count_names_line(self):
        text = CAR_LINE + "\n" + " ".join(CAR_LINE.split()[:14])
        with pytest.raises(LabelFormatError, match="line 2"):
            parse_kitti_labels(text)

    def test_non_numeric_field_names_line(self):
        bad = CAR_LINE.replace("46.70", "abc")
        with pytest.raises(LabelFormatError, match="line 1"):
            parse_kitti_labels(bad)

    def test_score_field(self):
        labels = parse_kitti_labels(CAR_LINE + " 0.87")
        assert labels[0].score == 0.87

    def test_dont_care_retained_with_flag(self):
        line = "DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10"
        labels = parse_kitti_labels(line)
        assert len(labels) == 1 and labels[0].dont_care

    def test_emit_parse_round_trip(self):
        labels = parse_kitti_labels(CAR_LINE + " 0.5\n" + CAR_LINE)
        again = parse_kitti_labels(format_kitti_labels(labels))
        assert again == labels


class TestSceneMapping:
    def test_documented_mapping(self):
        labels = parse_kitti_labels(CAR_LINE)
        box = kitti_to_scene_boxes(labels)[0]
        assert box.cx == 46.70
        assert box.cy == -0.65
        assert box.dx == 3.64
        assert box.dy == 1.67
        assert box.dz == 1.65
        assert box.cz == pytest.approx(1.65 / 2 - 1.71)
        assert box.theta == pytest.approx(1.59 - math.pi / 2)

    def test_heading_forward_gives_zero_yaw(self):
        lb = KittiLabel(
            type="Car", truncated=0, occluded=0, alpha=0, bbox=(0, 0, 50, 50),
            dimensions=(1.5, 1.6, 3.9), location=(2.0, 1.0, 30.0), rotation_y=-math.pi / 2,
        )
        assert kitti_to_scene_boxes([lb])[0].theta == pytest.approx(0.0)

    def test_box_round_trip_through_format(self):
        box = Box3D(cx=46.7, cy=-0.65, cz=0.885, dx=3.64, dy=1.67, dz=1.65, theta=0.021)
        text = format_kitti_labels([box_to_kitti_label(box, score=0.5)])
        back = kitti_to_scene_boxes(parse_kitti_labels(text))[0]
        assert np.allclose(back.as_array(), box.as_array(), atol=1e-4)

    def test_rigid_transform_applied(self):
        labels = parse_kitti_labels(CAR_LINE)
        tr = RigidTransform(yaw=0.5, tx=1.0, ty=-2.0, tz=0.3)
        base = kitti_to_scene_boxes(labels)[0]
        moved = kitti_to_scene_boxes(labels, tr)[0]
        c, s = math.cos(0.5), math.sin(0.5)
        assert moved.cx == pytest.approx(c * base.cx - s * base.cy + 1.0)
        assert moved.cy == pytest.approx(s * base.cx + c * base.cy - 2.0)
        assert moved.cz == pytest.approx(base.cz + 0.3)
        assert moved.theta == pytest.approx((base.theta + 0.5 + math.pi / 2) % math.pi - math.pi / 2)

    def test_empty_labels(self):
        assert kitti_to_scene_boxes([]) == []

    def test_difficulty_thresholds(self):
        def lb(h, occ, trunc):
            return KittiLabel(
                type="Car", truncated=trunc, occluded=occ, alpha=0, bbox=(0, 0, 10, h),
                dimensions=(1.5, 1.6, 3.9), location=(0, 1, 30), rotation_y=0,
            )

        assert label_difficulty(lb(45, 0, 0.1)) == 0
        assert label_difficulty(lb(30, 0, 0.1)) == 1
        assert label_difficulty(lb(45, 1, 0.1)) == 1
        assert label_difficulty(lb(30, 2, 0.4)) == 2
        assert label_difficulty(lb(45, 0, 0.45)) == 2
        assert label_difficulty(lb(20, 0, 0.0)) == 3
        assert label_difficulty(lb(45, 3, 0.0)) == 3


class TestSyntheticScenes:
    CFG = SyntheticConfig()

    def test_deterministic(self):
        a = generate_synthetic_scene(np.random.default_rng(1), self.CFG, "a")
        b = generate_synthetic_scene(np.random.default_rng(1), self.CFG, "a")
        assert np.array_equal(a.points, b.points)
        assert all(x.as_array().tolist() == y.as_array().tolist() for x, y in zip(a.boxes, b.boxes))

    def test_every_box_has_min_points(self):
        for seed in range(10):
            scene = generate_synthetic_scene(np.random.default_rng(seed), self.CFG, str(seed))
            for box in scene.boxes:
                assert count_points_in_box(scene.points[:, :2], box.bev()) >= 10

    def test_pairwise_overlap_bounded(self):
        for seed in range(10):
            scene = generate_synthetic_scene(np.random.default_rng(seed), self.CFG, str(seed))
            if len(scene.boxes) < 2:
                continue
            arr = scene.gt_bev()
            ious = rotated_iou_matrix(arr, arr)
            np.fill_diagonal(ious, 0.0)
            assert ious.max() < 0.05

    def test_scene_io_round_trip(self, tmp_path):
        scene = generate_synthetic_scene(np.random.default_rng(3), self.CFG, "00042")
        save_scene(tmp_path, scene)
        assert list_scene_ids(tmp_path) == ["00042"]
        loaded = load_scene(tmp_path, "00042")
        assert loaded.scene_id == "00042"
        assert np.allclose(loaded.points, scene.points, atol=1e-6)  # float32 storage
        assert len(loaded.boxes) == len(scene.boxes)
        for a, b in zip(loaded.boxes, scene.boxes):
            assert np.allclose(a.as_array(), b.as_array(), atol=1e-4)
        assert loaded.difficulties == [0] * len(scene.boxes)


class TestConfig:
    def test_empty_gives_paper_defaults(self):
        cfg = load_config("")
        assert cfg.diffusion.steps == 1000
        assert cfg.diffusion.signal_scale == 2.0
        assert cfg.proposals.n == 300
        assert cfg.proposals.eta == 5
        assert cfg.proposals.rho == 0.8
        assert cfg.proposals.omega == 5
        assert cfg.proposals.sigma == 0.5
        assert cfg.scene.size_max_x == 8.0
        assert cfg.scene.size_max_y == 5.0
        assert cfg.match.lambda_cls == 2.0
        assert cfg.match.lambda_reg == 5.0
        assert cfg.match.lambda_iou == 2.0
        assert cfg.eval.iou_threshold == 0.7

    def test_override(self):
        cfg = load_config("proposals.n = 100\n")
        assert cfg.proposals.n == 100

    def test_range_error_names_key(self):
        with pytest.raises(ConfigError, match="proposals.rho"):
            load_config("proposals.rho = 1.5")

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="nonsense"):
            load_config("nonsense.key = 1")
        with pytest.raises(ConfigError, match="bogus"):
            load_config("proposals.bogus = 1")

    def test_type_error_names_key(self):
        with pytest.raises(ConfigError, match="proposals.n"):
            load_config("proposals.n = many")

    def test_comments_and_blank_lines(self):
        cfg = load_config("# a comment\n\nproposals.n = 64  # inline\n")
        assert cfg.proposals.n == 64

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            load_config("proposals.n = 1\nproposals.n = 2\n")

    def test_order_independent(self):
        a = load_config("proposals.n = 7\ndiffusion.steps = 50\n")
        b = load_config("diffusion.steps = 50\nproposals.n = 7\n")
        assert config_to_text(a) == config_to_text(b)

    def test_round_trip_idempotent(self):
        cfg = load_config("proposals.n = 12\nnms.pool_all_steps = false\n")
        text = config_to_text(cfg)
        assert config_to_text(load_config(text)) == text

    def test_derived_objects(self):
        cfg = default_config()
        assert cfg.schedule().num_steps == 1000
        assert cfg.normalizer().signal_scale == 2.0
        assert cfg.grid_config().nx == 176
        assert cfg.effective_rho() == 0.8
        cfg.proposals.size_correlation = False
        assert cfg.effective_rho() == 0.0
