"""The fixed 14-label order shared by image scores, report labels and all metrics."""

LABELS = (
    "No Finding",
    "Enlarged Cardiomediastinum",
    "Cardiomegaly",
    "Lung Lesion",
    "Lung Opacity",
    "Edema",
    "Consolidation",
    "Pneumonia",
    "Atelectasis",
    "Pneumothorax",
    "Pleural Effusion",
    "Pleural Other",
    "Fracture",
    "Support Devices",
)
N_LABELS = len(LABELS)

# toy shapes -> label slots used by the desk-scale surrogate classifiers
TOY_LABEL_SLOTS = {
    "square": LABELS.index("Support Devices"),
    "circle": LABELS.index("Lung Lesion"),
    "bar": LABELS.index("Atelectasis"),
}
