from django import forms

from .config import (
    CE_REDUCTIONS,
    COSINE_MODES,
    MIX_STRATEGIES,
    OCCLUSION_LABELS,
    PAIRING_RULES,
    SUPERVISION_MODES,
)


def _choices(values):
    return [(v, v) for v in values]


def _switch_field():
    return forms.TypedChoiceField(
        choices=[('on', 'on'), ('off', 'off')],
        coerce=lambda value: value == 'on',
        error_messages={'invalid_choice': 'Use on or off.'},
    )


class TrainConfigForm(forms.Form):
    """
    Validates a merged key=value run configuration.
    Field domains follow TrainConfig; out-of-range values get readable messages.
    """

    data_dir = forms.CharField(required=False)
    epochs = forms.IntegerField(min_value=1)
    pairing = forms.ChoiceField(choices=_choices(PAIRING_RULES))
    lr = forms.FloatField()
    lambda1 = forms.FloatField(min_value=0)
    lambda2 = forms.FloatField(min_value=0)
    lambda3 = forms.FloatField(min_value=0)
    lambda4 = forms.FloatField(min_value=0)
    mix_strategy = forms.ChoiceField(
        choices=_choices(MIX_STRATEGIES),
        error_messages={'invalid_choice': 'Unknown mix strategy %(value)s.'},
    )
    occlusion = _switch_field()
    side_frac = forms.FloatField()
    occlusion_label = forms.ChoiceField(choices=_choices(OCCLUSION_LABELS))
    stopgrad = _switch_field()
    seed = forms.IntegerField(min_value=0)
    block_size = forms.IntegerField(min_value=1)
    window_radius = forms.IntegerField(min_value=0)
    n_iter = forms.IntegerField(min_value=1)
    supervision = forms.ChoiceField(choices=_choices(SUPERVISION_MODES))
    ce_reduction = forms.ChoiceField(choices=_choices(CE_REDUCTIONS))
    mixup_alpha = forms.FloatField()
    loss_cosine = forms.ChoiceField(choices=_choices(COSINE_MODES))
    base_channels = forms.IntegerField(min_value=4)
    num_classes = forms.IntegerField(min_value=2)
    eval_every = forms.IntegerField(min_value=1)

    def clean_lr(self):
        lr = self.cleaned_data.get('lr')
        if not lr > 0:
            raise forms.ValidationError('Learning rate must be positive.')
        return lr

    def clean_side_frac(self):
        side_frac = self.cleaned_data.get('side_frac')
        if not 0 < side_frac < 1:
            raise forms.ValidationError('Occlusion side fraction must lie strictly between 0 and 1.')
        return side_frac

    def clean_mixup_alpha(self):
        alpha = self.cleaned_data.get('mixup_alpha')
        if not alpha > 0:
            raise forms.ValidationError('MixUp alpha must be positive.')
        return alpha

    def clean_data_dir(self):
        return self.cleaned_data.get('data_dir', '').strip()

    def clean(self):
        """Cutout drops a region of one image and has no second source to occlude on top of."""
        cleaned = super().clean()
        if cleaned.get('mix_strategy') == 'cutout' and cleaned.get('occlusion'):
            self.add_error('occlusion', 'Occlusion cannot be combined with the cutout strategy.')
        return cleaned
