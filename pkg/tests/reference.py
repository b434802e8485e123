"""Published layer tables and per-class scores, frozen for comparison."""

# (layer name, output shape without the batch axis, parameter count)
LAYERS_2D = [
    ("conv2d_1", (80, 80, 32), 23072),
    ("conv2d_2", (80, 80, 64), 18496),
    ("conv2d_3", (80, 80, 64), 36928),
    ("conv2d_4", (80, 80, 64), 36928),
    ("conv2d_5", (80, 80, 64), 36928),
    ("batch_normalization_1", (80, 80, 64), 256),
    ("max_pooling2d_1", (40, 40, 64), 0),
    ("dropout_1", (40, 40, 64), 0),
    ("conv2d_6", (40, 40, 128), 73856),
    ("conv2d_7", (40, 40, 128), 147584),
    ("batch_normalization_2", (40, 40, 128), 512),
    ("max_pooling2d_2", (20, 20, 128), 0),
    ("dropout_2", (20, 20, 128), 0),
    ("conv2d_8", (20, 20, 256), 295168),
    ("conv2d_9", (20, 20, 256), 590080),
    ("conv2d_10", (20, 20, 256), 590080),
    ("batch_normalization_3", (20, 20, 256), 1024),
    ("max_pooling2d_3", (10, 10, 256), 0),
    ("dropout_3", (10, 10, 256), 0),
    ("flatten_1", (25600,), 0),
    ("dense_1", (1024,), 26215424),
    ("dropout_4", (1024,), 0),
    ("dense_2", (512,), 524800),
    ("dropout_5", (512,), 0),
    ("dense_3", (3,), 1539),
]
TOTALS_2D = (28592675, 28591779, 896)

LAYERS_3D = [
    ("conv3d_1", (80, 80, 80, 32), 896),
    ("batch_normalization_1", (80, 80, 80, 32), 128),
    ("max_pooling3d_1", (80, 40, 40, 32), 0),
    ("conv3d_2", (78, 38, 38, 64), 55360),
    ("conv3d_3", (76, 36, 36, 64), 110656),
    ("conv3d_4", (74, 34, 34, 64), 110656),
    ("conv3d_5", (72, 32, 32, 64), 110656),
    ("batch_normalization_2", (72, 32, 32, 64), 256),
    ("max_pooling3d_2", (72, 16, 16, 64), 0),
    ("dropout_1", (72, 16, 16, 64), 0),
    ("conv3d_6", (70, 14, 14, 128), 221312),
    ("conv3d_7", (68, 12, 12, 128), 442496),
    ("batch_normalization_3", (68, 12, 12, 128), 512),
    ("max_pooling3d_3", (68, 6, 6, 128), 0),
    ("dropout_2", (68, 6, 6, 128), 0),
    ("conv3d_8", (67, 5, 5, 256), 262400),
    ("conv3d_9", (66, 4, 4, 256), 524544),
    ("conv3d_10", (64, 2, 2, 256), 1769728),
    ("batch_normalization_4", (64, 2, 2, 256), 1024),
    ("max_pooling3d_4", (64, 1, 1, 256), 0),
    ("dropout_3", (64, 1, 1, 256), 0),
    ("flatten_1", (16384,), 0),
    ("dense_1", (1024,), 16778240),
    ("dropout_4", (1024,), 0),
    ("dense_2", (512,), 524800),
    ("dropout_5", (512,), 0),
    ("dense_3", (3,), 1539),
]
TOTALS_3D = (20915203, 20914243, 960)

# per class (newborn, 1yr, 3yr): precision, recall, F1 as printed
SCORES_2D = {"precision": [1.00, 0.86, 1.00], "recall": [0.91, 1.00, 0.94], "f1": [0.95, 0.93, 0.97]}
SCORES_3D = {"precision": [1.00, 0.95, 1.00], "recall": [1.00, 1.00, 0.97], "f1": [1.00, 0.97, 0.99]}
ACCURACY_2D = 0.953
ACCURACY_3D = 0.984
MACRO_SENSITIVITY_3D = 0.990

# validation cohort: 64 scans split 11 / 18 / 35
VALIDATION_ROWS = (11, 18, 35)
