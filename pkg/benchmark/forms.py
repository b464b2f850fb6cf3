"""
Validation of the JSON files the management commands consume. Each form takes
the decoded JSON object as its data; ``overrides()`` returns only the keys the
file actually set, ready to pass to the matching ``from_settings``.
"""
from django import forms

from gan.losses import RECONSTRUCTION_TARGETS
from gan.trainer import ABLATIONS, STAGES


class IntegerListField(forms.Field):
    """A JSON list of integers, or a comma-separated string of them."""

    def __init__(self, *, length=None, min_value=None, choices=None, **kwargs):
        self.length = length
        self.min_value = min_value
        self.choices = choices
        super().__init__(**kwargs)

    def to_python(self, value):
        if value is None or value == "":
            return None
        if isinstance(value, str):
            value = [part for part in value.split(",") if part.strip()]
        if not isinstance(value, (list, tuple)):
            raise forms.ValidationError("Enter a list of integers.", code="invalid")
        try:
            return [int(v) for v in value]
        except (TypeError, ValueError):
            raise forms.ValidationError("Enter a list of integers.", code="invalid")

    def validate(self, value):
        if value is None:
            return
        if self.length is not None and len(value) != self.length:
            raise forms.ValidationError(
                f"Expected {self.length} values, got {len(value)}.", code="length"
            )
        if self.min_value is not None and any(v < self.min_value for v in value):
            raise forms.ValidationError(
                f"Values must be >= {self.min_value}.", code="min_value"
            )
        if self.choices is not None and not set(value) <= set(self.choices):
            raise forms.ValidationError(
                f"Values must be drawn from {list(self.choices)}.",
                code="invalid_choice",
            )


class MatrixField(forms.Field):
    def to_python(self, value):
        if value in self.empty_values:
            return None
        if not isinstance(value, list) or not all(
            isinstance(row, list) for row in value
        ):
            raise forms.ValidationError("Enter a list of rows.", code="invalid")
        try:
            rows = [[float(v) for v in row] for row in value]
        except (TypeError, ValueError):
            raise forms.ValidationError(
                "Matrix entries must be numbers.", code="invalid"
            )
        if len({len(row) for row in rows}) > 1:
            raise forms.ValidationError(
                "All rows must have the same length.", code="ragged"
            )
        return rows


class JsonFileForm(forms.Form):
    """Rejects keys the form does not know about."""

    def clean(self):
        cleaned_data = super().clean()
        unknown = sorted(set(self.data) - set(self.fields))
        if unknown:
            raise forms.ValidationError(
                f"Unknown keys: {', '.join(unknown)}", code="unknown"
            )
        return cleaned_data

    def overrides(self):
        return {
            name: value
            for name, value in self.cleaned_data.items()
            if name in self.data and value is not None
        }


class EvalConfigForm(JsonFileForm):
    n_per_class = forms.IntegerField(required=False, min_value=1)
    lr = forms.FloatField(required=False, min_value=0)
    epochs = forms.IntegerField(required=False, min_value=0)
    l2 = forms.FloatField(required=False, min_value=0)
    per_class = forms.NullBooleanField(required=False)


class TrainConfigForm(JsonFileForm):
    k = forms.IntegerField(required=False, min_value=1)
    batch_size = forms.IntegerField(required=False, min_value=1)
    epochs = IntegerListField(required=False, length=3, min_value=0)
    learning_rate = forms.FloatField(
        required=False,
        min_value=0,
        help_text="Adam step size; 0 is accepted and leaves every parameter unchanged.",
    )
    adam_beta1 = forms.FloatField(required=False, min_value=0, max_value=1)
    adam_beta2 = forms.FloatField(required=False, min_value=0, max_value=1)
    adam_eps = forms.FloatField(required=False, min_value=0)
    gp_lambda = forms.FloatField(required=False, min_value=0)
    rec_beta = forms.FloatField(required=False, min_value=0)
    seed = forms.IntegerField(required=False, min_value=0)
    stages = IntegerListField(required=False, choices=STAGES)
    noise_dim = forms.IntegerField(required=False, min_value=1)
    prior_dim = forms.IntegerField(required=False, min_value=1)
    hidden_dim = forms.IntegerField(required=False, min_value=1)
    leaky_slope = forms.FloatField(required=False)
    init_scale = forms.FloatField(required=False, min_value=0)
    ridge = forms.FloatField(required=False, min_value=0)
    regressor_bias = forms.NullBooleanField(required=False)
    prior_grad_in_conditional = forms.NullBooleanField(required=False)
    reconstruction_target = forms.ChoiceField(
        required=False, choices=[(target, target) for target in RECONSTRUCTION_TARGETS]
    )
    eval = forms.Field(required=False)

    def clean_leaky_slope(self):
        slope = self.cleaned_data["leaky_slope"]
        if slope is not None and not 0.0 < slope < 1.0:
            raise forms.ValidationError(
                "leaky_slope must lie strictly between 0 and 1.", code="range"
            )
        return slope

    def clean_stages(self):
        stages = self.cleaned_data["stages"]
        if stages is not None and not stages:
            raise forms.ValidationError("At least one stage is required.", code="empty")
        return stages

    def clean_eval(self):
        value = self.cleaned_data["eval"]
        if value in (None, ""):
            return None
        if not isinstance(value, dict):
            raise forms.ValidationError("eval must be an object.", code="invalid")
        form = EvalConfigForm(value)
        if not form.is_valid():
            raise forms.ValidationError(
                f"eval: {form.errors.as_text()}", code="invalid"
            )
        return form.overrides()

    def overrides(self):
        values = super().overrides()
        if values.get("reconstruction_target") == "":
            values.pop("reconstruction_target")
        return values

    def split(self):
        """``(train, loss, eval)`` override dictionaries."""
        values = self.overrides()
        loss = {
            key: values.pop(key) for key in ("gp_lambda", "rec_beta") if key in values
        }
        evaluation = values.pop("eval", None) or {}
        if "stages" in values:
            values["stage_mask"] = values.pop("stages")
        return values, loss, evaluation


class SyntheticSpecForm(JsonFileForm):
    n_seen_classes = forms.IntegerField(required=False, min_value=1)
    n_unseen_classes = forms.IntegerField(required=False, min_value=1)
    samples_per_class = forms.IntegerField(required=False, min_value=2)
    feature_dim = forms.IntegerField(required=False, min_value=1)
    embed_dim = forms.IntegerField(required=False, min_value=1)
    mixing = MatrixField(required=False)
    cluster_std = forms.FloatField(required=False)
    seed = forms.IntegerField(required=False, min_value=0)
    train_fraction = forms.FloatField(required=False)

    def clean_cluster_std(self):
        std = self.cleaned_data["cluster_std"]
        if std is not None and std <= 0:
            raise forms.ValidationError("cluster_std must be positive.", code="range")
        return std

    def clean_train_fraction(self):
        fraction = self.cleaned_data["train_fraction"]
        if fraction is not None and not 0.0 < fraction < 1.0:
            raise forms.ValidationError(
                "train_fraction must lie strictly between 0 and 1.", code="range"
            )
        return fraction


class RunManifestForm(JsonFileForm):
    ABLATION_CHOICES = [(name, name) for name in ABLATIONS]

    config = forms.CharField(required=False)
    data = forms.CharField(required=False)
    out = forms.CharField(required=False)
    seed = forms.IntegerField(required=False, min_value=0)
    seeds = IntegerListField(required=False, min_value=0)
    stages = IntegerListField(required=False, choices=STAGES)
    ablation = forms.ChoiceField(required=False, choices=ABLATION_CHOICES)
    deterministic = forms.NullBooleanField(required=False)

    def clean(self):
        cleaned_data = super().clean()
        ablation = cleaned_data.get("ablation")
        stages = cleaned_data.get("stages")
        if ablation and stages is not None and set(stages) != ABLATIONS[ablation][0]:
            expected = sorted(ABLATIONS[ablation][0])
            raise forms.ValidationError(
                f"ablation {ablation} runs stages {expected}, not {sorted(stages)}.",
                code="ablation",
            )
        if stages is not None and not stages:
            self.add_error("stages", "At least one stage is required.")
        if cleaned_data.get("seeds") == []:
            self.add_error("seeds", "At least one seed is required.")
        return cleaned_data
